"""Minimal reverse-mode differentiation over dense numpy arrays.

Gradients here only ever flow into linear projection heads and a handful of
scalar parameters, so the op set is just the closure needed by the
alignment losses: matmul, transpose, add (+ bias broadcast), elementwise
mul, scale, row L2-normalization, dot, exp, log, sigmoid, logsumexp over a
list of scalars, row-wise max with argmax, mean over rows, Euclidean
distance, clamp, and gather/row indexing.

A Tape records Nodes in creation order, which is already a topological
order, so the backward pass is a single reverse sweep.  Everything is
computed in float64.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, StoryAlignError


class Node:
    """One recorded value in the computation graph."""

    __slots__ = ("tape", "value", "parents", "backward_fn", "grad", "trainable")

    def __init__(self, tape, value, parents=(), backward_fn=None, trainable=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Records a DAG of dense ops and runs one reverse sweep over it."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- leaves ------------------------------------------------------------

    def _push(self, value, parents=(), backward_fn=None, trainable=False) -> Node:
        for p in parents:
            if p.tape is not self:
                raise StoryAlignError("node belongs to a different tape")
        node = Node(self, _as_array(value), parents, backward_fn, trainable)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._push(value)

    def param(self, value) -> Node:
        """A trainable leaf; backward() leaves its gradient on .grad."""
        return self._push(value, trainable=True)

    def record(self, value, parents=(), backward_fn=None) -> Node:
        """Public extension point: register a composite op with a custom
        backward.  `backward_fn(g)` must accumulate into the parents via
        Tape.accumulate."""
        return self._push(value, parents, backward_fn)

    def accumulate(self, node: Node, grad: np.ndarray) -> None:
        self._accumulate(node, grad)

    # -- backward ----------------------------------------------------------

    def backward(self, root: Node) -> None:
        if root.tape is not self:
            raise StoryAlignError("root recorded on a different tape")
        if root.value.shape != ():
            raise StoryAlignError("backward requires a scalar root")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones(())
        root_index = self.nodes.index(root)
        for node in reversed(self.nodes[: root_index + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            node.backward_fn(node.grad)

    @staticmethod
    def _accumulate(node: Node, grad: np.ndarray) -> None:
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
        node.grad = node.grad + grad

    # -- ops ---------------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        value = a.value @ b.value

        def backward(g):
            if b.value.ndim == 1:  # matrix @ vector
                self._accumulate(a, np.outer(g, b.value) if a.value.ndim == 2 else g * b.value)
                self._accumulate(b, a.value.T @ g if a.value.ndim == 2 else g * a.value)
            else:
                self._accumulate(a, g @ b.value.T)
                self._accumulate(b, a.value.T @ g)

        return self._push(value, (a, b), backward)

    def transpose(self, a: Node) -> Node:
        def backward(g):
            self._accumulate(a, g.T)

        return self._push(a.value.T, (a,), backward)

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise StoryAlignError(f"add shape mismatch {a.value.shape} vs {b.value.shape}")

        def backward(g):
            self._accumulate(a, g)
            self._accumulate(b, g)

        return self._push(a.value + b.value, (a, b), backward)

    def sub(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise StoryAlignError(f"sub shape mismatch {a.value.shape} vs {b.value.shape}")

        def backward(g):
            self._accumulate(a, g)
            self._accumulate(b, -g)

        return self._push(a.value - b.value, (a, b), backward)

    def add_bias(self, m: Node, bias: Node) -> Node:
        """(n, d) matrix plus (d,) bias broadcast over rows."""
        if m.value.ndim != 2 or bias.value.shape != (m.value.shape[1],):
            raise StoryAlignError("add_bias expects (n,d) matrix and (d,) bias")

        def backward(g):
            self._accumulate(m, g)
            self._accumulate(bias, g.sum(axis=0))

        return self._push(m.value + bias.value, (m, bias), backward)

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise StoryAlignError(f"mul shape mismatch {a.value.shape} vs {b.value.shape}")

        def backward(g):
            self._accumulate(a, g * b.value)
            self._accumulate(b, g * a.value)

        return self._push(a.value * b.value, (a, b), backward)

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)

        def backward(g):
            self._accumulate(a, g * c)

        return self._push(a.value * c, (a,), backward)

    def row_l2_normalize(self, a: Node) -> Node:
        """Unit-normalize a vector, or each row of a matrix."""
        if a.value.ndim == 1:
            norm = np.linalg.norm(a.value)
            if norm == 0.0:
                raise DegenerateInputError("cannot normalize zero vector")
            out = a.value / norm

            def backward(g):
                self._accumulate(a, (g - out * np.dot(g, out)) / norm)

            return self._push(out, (a,), backward)
        norms = np.linalg.norm(a.value, axis=1, keepdims=True)
        if (norms == 0.0).any():
            raise DegenerateInputError("cannot normalize zero row")
        out = a.value / norms

        def backward(g):
            self._accumulate(a, (g - out * (g * out).sum(axis=1, keepdims=True)) / norms)

        return self._push(out, (a,), backward)

    def dot(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 1 or b.value.ndim != 1:
            raise StoryAlignError("dot expects 1-D vectors")
        if a.value.shape != b.value.shape:
            raise StoryAlignError("dot shape mismatch")

        def backward(g):
            self._accumulate(a, g * b.value)
            self._accumulate(b, g * a.value)

        return self._push(np.dot(a.value, b.value), (a, b), backward)

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)

        def backward(g):
            self._accumulate(a, g * out)

        return self._push(out, (a,), backward)

    def log(self, a: Node) -> Node:
        if (a.value <= 0.0).any():
            raise DegenerateInputError("log of non-positive value")

        def backward(g):
            self._accumulate(a, g / a.value)

        return self._push(np.log(a.value), (a,), backward)

    def sigmoid(self, a: Node) -> Node:
        out = 1.0 / (1.0 + np.exp(-a.value))

        def backward(g):
            self._accumulate(a, g * out * (1.0 - out))

        return self._push(out, (a,), backward)

    def clamp(self, a: Node, lo: float, hi: float) -> Node:
        # Gradient passes through entries that were not clipped.
        mask = (a.value >= lo) & (a.value <= hi)

        def backward(g):
            self._accumulate(a, g * mask)

        return self._push(np.clip(a.value, lo, hi), (a,), backward)

    def logsumexp_over_list(self, terms: list[Node]) -> Node:
        """Stable log(sum(exp(t))) over scalar nodes."""
        if not terms:
            raise StoryAlignError("logsumexp over empty list")
        for t in terms:
            if t.value.shape != ():
                raise StoryAlignError("logsumexp terms must be scalars")
        values = np.array([t.value for t in terms])
        m = values.max()
        shifted = np.exp(values - m)
        total = shifted.sum()
        out = m + np.log(total)
        weights = shifted / total  # softmax of the terms

        def backward(g):
            for t, w in zip(terms, weights):
                self._accumulate(t, g * w)

        return self._push(out, tuple(terms), backward)

    def rowwise_max_with_index(self, a: Node):
        """Max over the last axis with argmax indices (ties take the lowest
        index); gradient flows only through the argmax entries.

        Returns (values node, indices array): for a (r, c) matrix the values
        are (r,) and indices (r,); for a vector the value is scalar.
        """
        if a.value.ndim == 1:
            idx = int(np.argmax(a.value))

            def backward(g):
                grad = np.zeros_like(a.value)
                grad[idx] = g
                self._accumulate(a, grad)

            return self._push(a.value[idx], (a,), backward), idx
        if a.value.ndim != 2:
            raise StoryAlignError("rowwise_max_with_index expects 1-D or 2-D input")
        indices = np.argmax(a.value, axis=1)
        rows = np.arange(a.value.shape[0])

        def backward(g):
            grad = np.zeros_like(a.value)
            grad[rows, indices] = g
            self._accumulate(a, grad)

        return self._push(a.value[rows, indices], (a,), backward), indices

    def mean_over_rows(self, a: Node) -> Node:
        if a.value.ndim != 2:
            raise StoryAlignError("mean_over_rows expects a 2-D matrix")
        n = a.value.shape[0]

        def backward(g):
            self._accumulate(a, np.broadcast_to(g / n, a.value.shape))

        return self._push(a.value.mean(axis=0), (a,), backward)

    def euclidean_distance(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape or a.value.ndim != 1:
            raise StoryAlignError("euclidean_distance expects equal-shape vectors")
        diff = a.value - b.value
        dist = float(np.linalg.norm(diff))

        def backward(g):
            if dist == 0.0:  # subgradient choice at the kink
                return
            self._accumulate(a, g * diff / dist)
            self._accumulate(b, -g * diff / dist)

        return self._push(dist, (a, b), backward)

    def gather(self, a: Node, index: int) -> Node:
        if a.value.ndim != 1:
            raise StoryAlignError("gather expects a 1-D vector")
        index = int(index)

        def backward(g):
            grad = np.zeros_like(a.value)
            grad[index] = g
            self._accumulate(a, grad)

        return self._push(a.value[index], (a,), backward)

    def row(self, a: Node, index: int) -> Node:
        if a.value.ndim != 2:
            raise StoryAlignError("row expects a 2-D matrix")
        index = int(index)

        def backward(g):
            grad = np.zeros_like(a.value)
            grad[index, :] = g
            self._accumulate(a, grad)

        return self._push(a.value[index], (a,), backward)

    def sum_nodes(self, terms: list[Node]) -> Node:
        """Left fold of add; a single term is returned unchanged."""
        if not terms:
            raise StoryAlignError("sum over empty list")
        acc = terms[0]
        for t in terms[1:]:
            acc = self.add(acc, t)
        return acc

    def sum_all(self, a: Node) -> Node:
        def backward(g):
            self._accumulate(a, np.broadcast_to(g, a.value.shape))

        return self._push(a.value.sum(), (a,), backward)

    def add_scalar(self, a: Node, s: Node) -> Node:
        """Array plus a scalar node, broadcast over every entry."""
        if s.value.shape != ():
            raise StoryAlignError("add_scalar offset must be a scalar")

        def backward(g):
            self._accumulate(a, g)
            self._accumulate(s, np.asarray(g.sum()))

        return self._push(a.value + s.value, (a, s), backward)

    def mul_scalar(self, a: Node, s: Node) -> Node:
        """Array times a scalar node."""
        if s.value.shape != ():
            raise StoryAlignError("mul_scalar factor must be a scalar")

        def backward(g):
            self._accumulate(a, g * s.value)
            self._accumulate(s, np.asarray((g * a.value).sum()))

        return self._push(a.value * s.value, (a, s), backward)

    def group_mean_rows(self, a: Node, groups: np.ndarray) -> Node:
        """Mean of each contiguous row group of a (n, d) matrix.

        `groups` maps row -> group index and must be nondecreasing with
        every group 0..G-1 present, so group g's rows form one slice.
        Returns a (G, d) matrix; a size-1 group reproduces its row exactly
        (sum of one element, divided by 1).
        """
        groups = np.asarray(groups)
        if a.value.ndim != 2 or groups.shape != (a.value.shape[0],):
            raise StoryAlignError("group_mean_rows expects (n,d) rows and (n,) groups")
        if a.value.shape[0] == 0:
            raise StoryAlignError("group_mean_rows on empty matrix")
        if (np.diff(groups) < 0).any():
            raise StoryAlignError("groups must be nondecreasing")
        starts = np.flatnonzero(np.r_[True, np.diff(groups) != 0])
        counts = np.diff(np.r_[starts, groups.size]).astype(np.float64)
        value = np.add.reduceat(a.value, starts, axis=0) / counts[:, None]

        def backward(g):
            self._accumulate(a, np.repeat(g / counts[:, None], counts.astype(int), axis=0))

        return self._push(value, (a,), backward)

    def pairwise_euclidean(self, a: Node, b: Node) -> Node:
        """All-pairs Euclidean distances between rows: (m, d) x (n, d) -> (m, n).

        Zero-distance entries get a zero subgradient.
        """
        if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[1]:
            raise StoryAlignError("pairwise_euclidean expects (m,d) and (n,d)")
        diff = a.value[:, None, :] - b.value[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))

        def backward(g):
            w = np.where(dist > 0.0, g / np.where(dist > 0.0, dist, 1.0), 0.0)
            self._accumulate(a, w.sum(axis=1)[:, None] * a.value - w @ b.value)
            self._accumulate(b, w.sum(axis=0)[:, None] * b.value - w.T @ a.value)

        return self._push(dist, (a, b), backward)


def finite_difference_check(loss_builder, params: list[np.ndarray], h: float = 1e-4) -> float:
    """Max relative error between backward() gradients and central finite
    differences of the scalar loss.

    `loss_builder(tape, param_nodes) -> root Node` must rebuild the same
    computation for any parameter values.  Relative error uses a
    max(1, |analytic|) denominator.
    """
    if h <= 0:
        raise StoryAlignError("step size must be positive")
    params = [np.asarray(p, dtype=np.float64) for p in params]

    tape = Tape()
    nodes = [tape.param(p) for p in params]
    root = loss_builder(tape, nodes)
    tape.backward(root)
    analytic = [
        n.grad if n.grad is not None else np.zeros_like(n.value) for n in nodes
    ]

    def value_at(trial: list[np.ndarray]) -> float:
        t = Tape()
        return float(loss_builder(t, [t.param(p) for p in trial]).value)

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        for ci in range(flat.size):
            bumped = [q.copy() for q in params]
            bumped[pi].reshape(-1)[ci] = flat[ci] + h
            f_plus = value_at(bumped)
            bumped[pi].reshape(-1)[ci] = flat[ci] - h
            f_minus = value_at(bumped)
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = float(analytic[pi].reshape(-1)[ci])
            err = abs(numeric - ana) / max(1.0, abs(ana))
            worst = max(worst, err)
    return worst
