"""Article-to-image-set retrieval evaluation.

Every evaluation story contributes one query (its pooled, projected text)
and one candidate set (its ground-truth images truncated to the protocol
size).  Queries score against all candidate sets; the rank of the matching
set feeds recall and median-rank summaries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import DatasetManifest, EmbeddingMatrix
from .errors import ConfigError, DegenerateInputError, StoryAlignError

PROTOCOLS = ("fixed3", "fixed4", "fixed5", "mixed")
SCORERS = ("single", "mean")


def rank_of_gt(scores: np.ndarray, gt_index: int) -> int:
    """1 + the number of candidates scoring strictly higher than the
    ground-truth candidate, so ties resolve optimistically."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= gt_index < scores.shape[0]:
        raise ConfigError(f"gt_index {gt_index} outside {scores.shape[0]} candidates")
    return 1 + int(np.sum(scores > scores[gt_index]))


def recall_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise DegenerateInputError("no ranks to aggregate")
    return float(np.mean(ranks <= k))


def median_rank(ranks) -> int:
    """Lower median: the element at index (n - 1) // 2 of the sorted ranks."""
    ranks = np.sort(np.asarray(ranks))
    if ranks.size == 0:
        raise DegenerateInputError("no ranks to aggregate")
    return int(ranks[(ranks.size - 1) // 2])


def aggregate(ranks) -> dict:
    return {
        "recall_at_1": recall_at_k(ranks, 1),
        "recall_at_5": recall_at_k(ranks, 5),
        "recall_at_10": recall_at_k(ranks, 10),
        "median_rank": median_rank(ranks),
        "n_queries": int(len(ranks)),
    }


@dataclass
class RetrievalReport:
    protocol: str
    scorer: str
    metrics: dict
    ranks: list[int]
    query_ids: list[str]
    per_size: dict[int, dict] | None = None

    def to_json(self) -> str:
        payload = {
            "protocol": self.protocol,
            "scorer": self.scorer,
            "metrics": self.metrics,
            "ranks": self.ranks,
            "query_ids": self.query_ids,
        }
        if self.per_size is not None:
            payload["per_size"] = {str(k): v for k, v in sorted(self.per_size.items())}
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    def render(self) -> str:
        rows = [("overall", self.metrics)]
        if self.per_size:
            rows += [(f"size={s}", m) for s, m in sorted(self.per_size.items())]
        lines = [
            f"protocol={self.protocol} scorer={self.scorer}",
            f"{'split':<10} {'R@1':>7} {'R@5':>7} {'R@10':>7} {'med':>5} {'n':>5}",
        ]
        for name, m in rows:
            lines.append(
                f"{name:<10} {m['recall_at_1']:>7.4f} {m['recall_at_5']:>7.4f} "
                f"{m['recall_at_10']:>7.4f} {m['median_rank']:>5d} {m['n_queries']:>5d}"
            )
        return "\n".join(lines) + "\n"


def _unit_rows(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((rows * rows).sum(axis=1))
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"zero-norm {what} cannot be scored under cosine")
    return rows / norms[:, None]


@dataclass
class ScoreMatrix:
    """Every query scored against every candidate set, with the
    ground-truth column recorded per query."""

    scores: np.ndarray              # (Q, C)
    query_ids: list[str]
    candidate_ids: list[str]
    gt_index: dict[str, int]        # query id -> ground-truth column

    def __post_init__(self):
        q, c = self.scores.shape
        if len(self.query_ids) != q or len(self.candidate_ids) != c:
            raise StoryAlignError("score matrix ids disagree with its shape")
        for qid in self.query_ids:
            col = self.gt_index.get(qid)
            if col is None or not 0 <= col < c:
                raise StoryAlignError(f"query {qid} lacks a valid ground-truth column")

    def ranks(self) -> list[int]:
        return [
            rank_of_gt(self.scores[i], self.gt_index[qid])
            for i, qid in enumerate(self.query_ids)
        ]


def score_all(query_vectors: np.ndarray, candidate_sets: list[np.ndarray],
              scorer: str, query_ids: list[str] | None = None,
              candidate_ids: list[str] | None = None,
              gt_index: dict[str, int] | None = None) -> ScoreMatrix:
    """Full query-by-candidate score matrix over projected representations.

    candidate_sets holds one (n_i, D) row matrix per candidate image set.
    Without an explicit gt mapping the matrix must be square and the
    diagonal is taken as ground truth.
    """
    query_vectors = np.atleast_2d(np.asarray(query_vectors, dtype=np.float64))
    if query_vectors.shape[0] == 0 or not candidate_sets:
        raise DegenerateInputError("need at least one query and one candidate set")
    sizes = np.array([np.atleast_2d(s).shape[0] for s in candidate_sets], dtype=np.int64)
    flat = np.concatenate([np.atleast_2d(np.asarray(s, dtype=np.float64))
                           for s in candidate_sets], axis=0)
    scores = score_sets(query_vectors, flat, sizes, scorer)
    q, c = scores.shape
    query_ids = query_ids if query_ids is not None else [f"q{i}" for i in range(q)]
    candidate_ids = candidate_ids if candidate_ids is not None else [f"c{j}" for j in range(c)]
    if gt_index is None:
        if q != c:
            raise StoryAlignError(
                "diagonal ground truth needs a square matrix; pass gt_index"
            )
        gt_index = {qid: i for i, qid in enumerate(query_ids)}
    return ScoreMatrix(scores=scores, query_ids=query_ids,
                       candidate_ids=candidate_ids, gt_index=gt_index)


def protocol_sizes(protocol: str, n_queries: int, seed: int) -> np.ndarray:
    """Candidate-set size per query: a constant for fixed protocols, a
    seeded uniform draw from {3, 4, 5} for mixed."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    if protocol == "mixed":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x512E]))
        return rng.integers(3, 6, size=n_queries)
    return np.full(n_queries, int(protocol[-1]), dtype=np.int64)


def score_sets(queries: np.ndarray, set_rows: np.ndarray, set_sizes: np.ndarray,
               scorer: str) -> np.ndarray:
    """Score every query against every candidate set.

    queries: (B, D) raw projected query vectors.
    set_rows: flat projected image rows, set-contiguous.
    set_sizes: rows per set, in order.

    single: mean per-image cosine.  mean: cosine against the normalized
    pooled set vector.
    """
    if scorer not in SCORERS:
        raise ConfigError(f"scorer must be one of {SCORERS}, got {scorer!r}")
    qn = _unit_rows(queries, "query")
    starts = np.concatenate(([0], np.cumsum(set_sizes)[:-1]))
    if scorer == "mean":
        pooled = np.add.reduceat(set_rows, starts, axis=0) / set_sizes[:, None]
        return qn @ _unit_rows(pooled, "pooled image set").T
    per_image = qn @ _unit_rows(set_rows, "image").T        # (B, total_rows)
    return np.add.reduceat(per_image, starts, axis=1) / set_sizes[None, :]


def evaluate(manifest: DatasetManifest, text: EmbeddingMatrix,
             image: EmbeddingMatrix, text_head, image_head,
             protocol: str = "fixed5", scorer: str = "mean",
             seed: int = 0) -> RetrievalReport:
    """Run the full protocol over every story in the manifest.

    Stories must carry ground-truth sets (the select-sets stage).  Heads
    are linear projections with an .apply(rows) method.
    """
    stories = manifest.stories
    if not stories:
        raise DegenerateInputError("no stories to evaluate")
    sizes = protocol_sizes(protocol, len(stories), seed)

    queries = []
    flat_rows = []
    query_ids = []
    for story, size in zip(stories, sizes):
        if story.ground_truth_set is None:
            raise StoryAlignError(
                f"story {story.story_id} has no ground-truth set; run select-sets first"
            )
        gt = sorted(story.ground_truth_set)
        if len(gt) < size:
            raise DegenerateInputError(
                f"story {story.story_id} ground truth has {len(gt)} images, need {size}"
            )
        sentence_ids = [s for a in story.articles for s in a.sentences]
        if not sentence_ids:
            raise DegenerateInputError(f"story {story.story_id} has no sentences")
        queries.append(text_head.apply(text.take(sentence_ids)).mean(axis=0))
        flat_rows.append(image_head.apply(image.take(gt[: int(size)])))
        query_ids.append(story.story_id)

    matrix = score_all(np.stack(queries), flat_rows, scorer,
                       query_ids=query_ids, candidate_ids=list(query_ids))
    ranks = matrix.ranks()

    per_size = None
    if protocol == "mixed":
        per_size = {}
        for s in (3, 4, 5):
            subset = [r for r, sz in zip(ranks, sizes) if sz == s]
            if subset:
                per_size[s] = aggregate(subset)
    return RetrievalReport(
        protocol=protocol,
        scorer=scorer,
        metrics=aggregate(ranks),
        ranks=ranks,
        query_ids=query_ids,
        per_size=per_size,
    )
