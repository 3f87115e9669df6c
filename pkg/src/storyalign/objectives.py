"""Alignment objectives over projected embeddings, plus the set-scoring
conventions shared with evaluation.

Losses are recorded on a diff tape (see autodiff) so gradients reach the
projection heads; the scoring helpers at the bottom are plain numpy since
evaluation never needs gradients.

Batch layout: stories are concatenated into flat row matrices with an
integer group array mapping each row to its story.  Negatives are strictly
in-batch: for story b they are exactly the members of every other story.

Contrastive conventions (shared `_grouped_nce` core):
  loss_b = logsumexp(positives + negatives) - logsumexp(positives)
which is 0 when no negatives exist, reduces MIL-NCE with one image per
story to plain InfoNCE bit-for-bit, and keeps every loss nonnegative
whenever no negative similarity exceeds the positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .errors import ConfigError, DegenerateInputError, StoryAlignError

PROB_CLAMP = 1e-7  # match probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP]


@dataclass(frozen=True)
class SimilarityConfig:
    """Similarity convention: temperature-scaled cosine (normalize=True)
    or raw dot product."""

    temperature: float = 0.07
    normalize: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass
class BatchTensors:
    """Projected per-story rows, story-contiguous, with pooled vectors.

    sentences: (total_sentences, D) node; row i belongs to story
    sentence_story[i].  images likewise.  pooled_text / pooled_images hold
    the arithmetic row means per story, shape (B, D); pooling happens on
    the tape so gradients flow back through it.
    """

    tape: Tape
    sentences: Node
    images: Node
    sentence_story: np.ndarray
    image_story: np.ndarray
    pooled_text: Node
    pooled_images: Node
    batch_size: int
    story_ids: list[str] | None = None

    @classmethod
    def from_projected(cls, tape, sentences, images, sentence_story, image_story,
                       story_ids=None):
        sentence_story = np.asarray(sentence_story, dtype=np.intp)
        image_story = np.asarray(image_story, dtype=np.intp)
        if sentence_story.size == 0 or image_story.size == 0:
            raise DegenerateInputError("empty batch")
        b = int(sentence_story.max()) + 1
        for name, groups in (("sentence", sentence_story), ("image", image_story)):
            present = np.unique(groups)
            if not np.array_equal(present, np.arange(b)):
                raise DegenerateInputError(
                    f"every story needs at least one {name} row (got groups {present})"
                )
            if (np.diff(groups) < 0).any():
                raise StoryAlignError(f"{name} rows must be story-contiguous")
        return cls(
            tape=tape,
            sentences=sentences,
            images=images,
            sentence_story=sentence_story,
            image_story=image_story,
            pooled_text=tape.group_mean_rows(sentences, sentence_story),
            pooled_images=tape.group_mean_rows(images, image_story),
            batch_size=b,
            story_ids=list(story_ids) if story_ids is not None else None,
        )

    def negatives(self, b: int) -> list[int]:
        """Stories serving as negatives for story b (everyone else,
        ascending)."""
        return [o for o in range(self.batch_size) if o != b]


def batch_from_arrays(tape: Tape, sentence_mats, image_mats, story_ids=None) -> BatchTensors:
    """Build a BatchTensors from per-story numpy matrices (test and
    evaluation convenience; rows become tape constants)."""
    if len(sentence_mats) == 0 or len(sentence_mats) != len(image_mats):
        raise DegenerateInputError("need one sentence and one image matrix per story")
    sent_groups = np.concatenate(
        [np.full(len(m), b, dtype=np.intp) for b, m in enumerate(sentence_mats)]
    )
    img_groups = np.concatenate(
        [np.full(len(m), b, dtype=np.intp) for b, m in enumerate(image_mats)]
    )
    sentences = tape.constant(np.concatenate([np.atleast_2d(m) for m in sentence_mats]))
    images = tape.constant(np.concatenate([np.atleast_2d(m) for m in image_mats]))
    return BatchTensors.from_projected(tape, sentences, images, sent_groups,
                                       img_groups, story_ids)


# ---------------------------------------------------------------------------
# contrastive core

def _grouped_nce(tape: Tape, sims: Node, groups: np.ndarray, tau: float) -> Node:
    """Mean over stories of the contrastive loss on a (B, M) text-by-image
    similarity matrix whose column j belongs to story groups[j].

    Positives for story b are row b's entries over its own columns; the
    denominator additionally pairs those columns with every other text row
    and row b with every other story's columns.
    """
    groups = np.asarray(groups, dtype=np.intp)
    b_count, m = sims.value.shape
    if groups.shape != (m,):
        raise StoryAlignError("column group array does not match similarity matrix")
    a = sims.value / tau

    def lse(arr):
        mx = arr.max()
        return mx + np.log(np.exp(arr - mx).sum())

    pos_lse = np.empty(b_count)
    denom_lse = np.empty(b_count)
    for b in range(b_count):
        own = groups == b
        pos_lse[b] = lse(a[b, own])
        denom_lse[b] = lse(np.concatenate([a[:, own].ravel(), a[b, ~own]]))
    value = (denom_lse - pos_lse).mean()

    def backward(g):
        col_d = denom_lse[groups]  # denominator owning each column
        w = np.exp(a - col_d[None, :])
        off = groups[None, :] != np.arange(b_count)[:, None]
        w = w + np.exp(a - denom_lse[:, None]) * off
        # Mask inside exp: positive entries never exceed their own lse, but
        # off-group entries can, and exp would overflow before the mask.
        w = w - np.exp(np.where(off, -np.inf, a - pos_lse[:, None]))
        tape.accumulate(sims, g * w / (b_count * tau))

    return tape.record(np.asarray(value), (sims,), backward)


def _maybe_normalize(tape: Tape, rows: Node, cfg: SimilarityConfig) -> Node:
    return tape.row_l2_normalize(rows) if cfg.normalize else rows


def infonce_loss(batch: BatchTensors, cfg: SimilarityConfig) -> Node:
    """Article-level InfoNCE: one positive per story, the pooled article
    vector against the pooled image set, negatives from all other stories
    on both sides.  Returns the batch mean."""
    tape = batch.tape
    text = _maybe_normalize(tape, batch.pooled_text, cfg)
    images = _maybe_normalize(tape, batch.pooled_images, cfg)
    sims = tape.matmul(text, tape.transpose(images))
    return _grouped_nce(tape, sims, np.arange(batch.batch_size), cfg.temperature)


def milnce_loss(batch: BatchTensors, cfg: SimilarityConfig) -> Node:
    """Multiple-instance InfoNCE: the numerator sums over every image of
    the story; the denominator adds the usual cross-story negative terms,
    so one image per story reproduces infonce_loss exactly."""
    tape = batch.tape
    text = _maybe_normalize(tape, batch.pooled_text, cfg)
    images = _maybe_normalize(tape, batch.images, cfg)
    sims = tape.matmul(text, tape.transpose(images))
    return _grouped_nce(tape, sims, batch.image_story, cfg.temperature)


# ---------------------------------------------------------------------------
# best-sentence machinery

def _groupwise_colmax(tape: Tape, sims: Node, col_groups: np.ndarray):
    """Per row, the max over each contiguous column group: (R, C) with G
    groups -> values (R, G) plus absolute argmax columns (ties take the
    lowest column)."""
    col_groups = np.asarray(col_groups, dtype=np.intp)
    starts = np.flatnonzero(np.r_[True, np.diff(col_groups) != 0])
    bounds = np.r_[starts, col_groups.size]
    r = sims.value.shape[0]
    g_count = starts.size
    values = np.empty((r, g_count))
    indices = np.empty((r, g_count), dtype=np.intp)
    for g in range(g_count):
        block = sims.value[:, bounds[g]:bounds[g + 1]]
        local = block.argmax(axis=1)
        indices[:, g] = bounds[g] + local
        values[:, g] = block[np.arange(r), local]

    def backward(grad):
        out = np.zeros_like(sims.value)
        np.add.at(out, (np.arange(r)[:, None], indices), grad)
        tape.accumulate(sims, out)

    return tape.record(values, (sims,), backward), indices


def _rowwise_softmax_ce(tape: Tape, z: Node, targets: np.ndarray) -> Node:
    """Sum over rows of logsumexp(row) - row[target]."""
    targets = np.asarray(targets, dtype=np.intp)
    r = z.value.shape[0]
    mx = z.value.max(axis=1)
    lse = mx + np.log(np.exp(z.value - mx[:, None]).sum(axis=1))
    value = (lse - z.value[np.arange(r), targets]).sum()

    def backward(g):
        soft = np.exp(z.value - lse[:, None])
        soft[np.arange(r), targets] -= 1.0
        tape.accumulate(z, g * soft)

    return tape.record(np.asarray(value), (z,), backward)


def milsim_sentence_sim(image_vec: np.ndarray, sentence_rows: np.ndarray,
                        cfg: SimilarityConfig) -> tuple[int, float]:
    """Best-matching sentence for one image: (argmax index, similarity),
    ties resolved to the lowest index."""
    sentence_rows = np.atleast_2d(np.asarray(sentence_rows, dtype=np.float64))
    if sentence_rows.shape[0] == 0:
        raise DegenerateInputError("no sentences to match against")
    image_vec = np.asarray(image_vec, dtype=np.float64)
    if cfg.normalize:
        image_vec = _unit(image_vec)
        sentence_rows = _unit_rows(sentence_rows)
    sims = sentence_rows @ image_vec
    idx = int(np.argmax(sims))
    return idx, float(sims[idx])


def milsim_loss(batch: BatchTensors, lam: float, cfg: SimilarityConfig) -> Node:
    """Pooled article-level InfoNCE plus a lam-weighted per-image InfoNCE
    against each image's best-matching sentence.

    The article-level similarity is the raw dot of the pooled vectors
    (the stated article-level formula); the sentence-level similarity
    follows cfg.  Sentence-side negatives are, per other story, that
    story's highest-scoring sentence for the image in question.  The total
    is divided by the batch size so lam=0 equals the raw-dot infonce_loss
    exactly.
    """
    if lam < 0:
        raise ConfigError(f"trade-off weight must be nonnegative, got {lam}")
    tape = batch.tape

    raw = SimilarityConfig(temperature=cfg.temperature, normalize=False)
    article = infonce_loss(batch, raw)

    sentences = _maybe_normalize(tape, batch.sentences, cfg)
    images = _maybe_normalize(tape, batch.images, cfg)
    sims = tape.matmul(images, tape.transpose(sentences))  # (total_images, total_sentences)
    best, _ = _groupwise_colmax(tape, sims, batch.sentence_story)  # (total_images, B)
    scaled = tape.scale(best, 1.0 / cfg.temperature)
    sentence_sum = _rowwise_softmax_ce(tape, scaled, batch.image_story)

    return tape.add(article, tape.scale(sentence_sum, lam / batch.batch_size))


# ---------------------------------------------------------------------------
# probabilistic matching

@dataclass
class PcmeHead:
    """Probabilistic matching parameters: sigmoid scale/offset, sample
    count, and per-modality linear maps producing diagonal log-variances
    from base embeddings."""

    alpha: np.ndarray  # 0-d, kept as an array so optimizer updates land in place
    beta: np.ndarray   # 0-d
    k: int
    image_logvar_weight: np.ndarray
    image_logvar_bias: np.ndarray
    text_logvar_weight: np.ndarray
    text_logvar_bias: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if not float(self.alpha) > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.k < 1:
            raise ConfigError(f"need at least one sample, got k={self.k}")

    @classmethod
    def create(cls, text_base_dim: int, image_base_dim: int, joint_dim: int,
               alpha: float = 1.0, beta: float = 0.0, k: int = 7,
               logvar_init: float = -4.0) -> "PcmeHead":
        """Zero-weight variance maps with a constant log-variance bias, so
        sampling starts with modest isotropic noise (std = e^{init/2})."""
        return cls(
            alpha=alpha,
            beta=beta,
            k=k,
            image_logvar_weight=np.zeros((image_base_dim, joint_dim)),
            image_logvar_bias=np.full(joint_dim, float(logvar_init)),
            text_logvar_weight=np.zeros((text_base_dim, joint_dim)),
            text_logvar_bias=np.full(joint_dim, float(logvar_init)),
        )

    def params(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in checkpoint order."""
        return [
            ("pcme.alpha", self.alpha),
            ("pcme.beta", self.beta),
            ("pcme.image_logvar.weight", self.image_logvar_weight),
            ("pcme.image_logvar.bias", self.image_logvar_bias),
            ("pcme.text_logvar.weight", self.text_logvar_weight),
            ("pcme.text_logvar.bias", self.text_logvar_bias),
        ]


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(np.asarray(x, dtype=np.float64))


def pcme_match_prob(tape: Tape, image_samples: list[Node], text_samples: list[Node],
                    alpha, beta) -> Node:
    """Match probability between two sampled instances:
    (1/K_I K_L) sum over sample pairs of sigmoid(-alpha * distance + beta).
    Always strictly inside (0, 1)."""
    if not image_samples or not text_samples:
        raise DegenerateInputError("need at least one sample per modality")
    alpha = _as_node(tape, alpha)
    beta = _as_node(tape, beta)
    terms = []
    for zi in image_samples:
        for zl in text_samples:
            d = tape.euclidean_distance(zi, zl)
            logit = tape.add(tape.scale(tape.mul(alpha, d), -1.0), beta)
            terms.append(tape.sigmoid(logit))
    mean = tape.scale(tape.sum_nodes(terms), 1.0 / (len(image_samples) * len(text_samples)))
    return mean


def soft_contrastive_loss(tape: Tape, probs: list[Node], matches: list[bool]) -> Node:
    """-log p for matching pairs, -log(1-p) otherwise, averaged; inputs
    are clamped away from 0 and 1 first."""
    if not probs or len(probs) != len(matches):
        raise DegenerateInputError("need one match label per probability")
    one = tape.constant(np.ones(()))
    terms = []
    for p, is_match in zip(probs, matches):
        pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
        inner = pc if is_match else tape.sub(one, pc)
        terms.append(tape.scale(tape.log(inner), -1.0))
    return tape.scale(tape.sum_nodes(terms), 1.0 / len(terms))


def pcme_loss(tape: Tape, image_means: Node, text_means: Node,
              image_logvars: Node, text_logvars: Node,
              image_story: np.ndarray, alpha, beta,
              eps_image: np.ndarray, eps_text: np.ndarray) -> Node:
    """Soft contrastive loss over every (image row, story text) pair in a
    batch.

    Means and log-variances are (rows, D) nodes; eps_* are pre-drawn
    standard-normal arrays of shape (K, rows, D) so the same draws can be
    replayed (finite-difference checks rely on that).  Pair (j, b) matches
    iff image j belongs to story b.  Gradients reach the projection heads,
    the variance heads, and alpha/beta.
    """
    image_story = np.asarray(image_story, dtype=np.intp)
    k_img, k_txt = eps_image.shape[0], eps_text.shape[0]
    alpha = _as_node(tape, alpha)
    beta = _as_node(tape, beta)

    img_std = tape.exp(tape.scale(image_logvars, 0.5))
    txt_std = tape.exp(tape.scale(text_logvars, 0.5))
    img_samples = [
        tape.add(image_means, tape.mul(img_std, tape.constant(eps_image[k])))
        for k in range(k_img)
    ]
    txt_samples = [
        tape.add(text_means, tape.mul(txt_std, tape.constant(eps_text[k])))
        for k in range(k_txt)
    ]

    acc = None
    for zi in img_samples:
        for zl in txt_samples:
            d = tape.pairwise_euclidean(zi, zl)  # (rows_img, B)
            logit = tape.add_scalar(tape.scale(tape.mul_scalar(d, alpha), -1.0), beta)
            s = tape.sigmoid(logit)
            acc = s if acc is None else tape.add(acc, s)
    probs = tape.scale(acc, 1.0 / (k_img * k_txt))
    probs = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)

    n_img, n_story = probs.value.shape
    match = (image_story[:, None] == np.arange(n_story)[None, :]).astype(np.float64)
    pos = tape.sum_all(tape.mul(tape.log(probs), tape.constant(match)))
    comp = tape.sub(tape.constant(np.ones((n_img, n_story))), probs)
    neg = tape.sum_all(tape.mul(tape.log(comp), tape.constant(1.0 - match)))
    return tape.scale(tape.add(pos, neg), -1.0 / (n_img * n_story))


# ---------------------------------------------------------------------------
# plain-numpy scoring used at evaluation time

def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize zero vector")
    return v / norm


def _unit_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if (norms == 0.0).any():
        raise DegenerateInputError("cannot normalize zero row")
    return m / norms


def pair_similarity(a: np.ndarray, b: np.ndarray, cfg: SimilarityConfig) -> float:
    """Cosine (cfg.normalize) or raw dot between two vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StoryAlignError(f"similarity needs equal-dim vectors, got {a.shape} vs {b.shape}")
    if cfg.normalize:
        a, b = _unit(a), _unit(b)
    return float(a @ b)


def set_score_single(text_vec: np.ndarray, image_rows: np.ndarray,
                     cfg: SimilarityConfig) -> float:
    """Mean over the set of per-image similarities to the text vector."""
    image_rows = np.atleast_2d(np.asarray(image_rows, dtype=np.float64))
    if image_rows.shape[0] == 0:
        raise DegenerateInputError("empty image set")
    return float(
        np.mean([pair_similarity(text_vec, row, cfg) for row in image_rows])
    )


def set_score_mean_agg(text_vec: np.ndarray, image_rows: np.ndarray,
                       cfg: SimilarityConfig) -> float:
    """Similarity between the text vector and the arithmetic mean of the
    image rows; normalization (if any) applies after pooling, so a zero
    pooled vector is degenerate under cosine."""
    image_rows = np.atleast_2d(np.asarray(image_rows, dtype=np.float64))
    if image_rows.shape[0] == 0:
        raise DegenerateInputError("empty image set")
    return pair_similarity(text_vec, image_rows.mean(axis=0), cfg)
