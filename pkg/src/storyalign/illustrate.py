"""Illustrating a new article: extract named entities, assemble a
candidate image pool from a pluggable lookup provider, pick the set of X
images whose pooled representation best matches the article, and
optionally attribute each chosen image to its best sentence.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .dataio import EmbeddingMatrix
from .errors import ConfigError, DegenerateInputError, FormatError, StoryAlignError
from .objectives import (
    SimilarityConfig,
    milsim_sentence_sim,
    set_score_mean_agg,
    set_score_single,
)

_CAP_TOKEN = re.compile(r"[A-Z][\w'-]*")
_WORD = re.compile(r"[\w'-]+")


def extract_entities(text: str) -> list[str]:
    """Runs of consecutive capitalized tokens, deduplicated
    case-insensitively in order of first appearance.  A cheap stand-in for
    a real named-entity recognizer."""
    entities = []
    seen = set()
    run: list[str] = []

    def flush():
        if run:
            name = " ".join(run)
            if name.lower() not in seen:
                seen.add(name.lower())
                entities.append(name)
            run.clear()

    for token in _WORD.findall(text):
        if _CAP_TOKEN.fullmatch(token):
            run.append(token)
        else:
            flush()
    flush()
    return entities


@dataclass
class CandidatePool:
    """Per-entity candidates plus the deduplicated flat pool."""

    per_entity: dict[str, list[str]]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            seen = set()
            for cands in self.per_entity.values():
                for cid in cands:
                    if cid not in seen:
                        seen.add(cid)
                        self.ids.append(cid)

    @property
    def size(self) -> int:
        return len(self.ids)


def candidate_pool_from_entities(entities: list[str], lookup,
                                 m: int) -> CandidatePool:
    """Query the lookup provider for each entity, keep its top m
    candidates, and flatten with cross-entity dedup."""
    if not entities:
        raise DegenerateInputError("no entities to build a pool from")
    if m < 1:
        raise ConfigError("per-entity candidate count must be positive")
    per_entity = {e: list(lookup(e))[:m] for e in entities}
    pool = CandidatePool(per_entity=per_entity)
    if pool.size == 0:
        raise DegenerateInputError("lookup produced an empty candidate pool")
    return pool


class EmbeddingLookupProvider:
    """Ranks a fixed image collection by cosine similarity between an
    entity's hashed vector and the image embeddings.  Stands in for an
    external image-database search."""

    def __init__(self, ids: list[str], rows: np.ndarray, encoder):
        if len(ids) != rows.shape[0]:
            raise StoryAlignError("lookup ids and rows disagree in length")
        order = np.argsort(np.asarray(ids))
        self.ids = [ids[int(i)] for i in order]
        rows = np.asarray(rows, dtype=np.float64)[order]
        norms = np.linalg.norm(rows, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateInputError("zero-norm image row in lookup collection")
        self.unit_rows = rows / norms[:, None]
        self.encoder = encoder

    def __call__(self, entity: str) -> list[str]:
        sims = self.unit_rows @ self.encoder(entity)
        order = np.lexsort((np.arange(sims.shape[0]), -sims))
        return [self.ids[int(i)] for i in order]


class MappingLookupProvider:
    """Candidates straight from a dict; unknown entities get none."""

    def __init__(self, mapping: dict[str, list[str]]):
        self.mapping = {k.lower(): list(v) for k, v in mapping.items()}

    def __call__(self, entity: str) -> list[str]:
        return list(self.mapping.get(entity.lower(), []))


def best_image_set(article_vec: np.ndarray, pool: CandidatePool,
                   rows_by_id, x: int, scorer: str = "mean",
                   budget: int = 10_000, seed: int = 0,
                   normalize: bool = True) -> tuple[list[str], float]:
    """The X-combination of pool images maximizing the set score for the
    article vector (both already projected into the joint space).

    rows_by_id maps an image id to its projected row; an EmbeddingMatrix
    works directly.  Exhaustive enumeration (lexicographic over the
    canonically sorted pool) when C(n, X) fits the budget, else a seeded
    sample.  Ties keep the lexicographically smallest id tuple.
    """
    if scorer not in ("single", "mean"):
        raise ConfigError(f"scorer must be single or mean, got {scorer!r}")
    if x < 1:
        raise ConfigError("set size must be positive")
    if pool.size < x:
        raise DegenerateInputError(f"pool of {pool.size} cannot yield a set of {x}")
    article_vec = np.asarray(article_vec, dtype=np.float64)
    if normalize and float(article_vec @ article_vec) == 0.0:
        raise DegenerateInputError("zero article vector cannot be scored under cosine")

    ids = sorted(pool.ids)
    take = rows_by_id.take if hasattr(rows_by_id, "take") else None
    rows = (take(ids) if take is not None
            else np.stack([rows_by_id[i] for i in ids])).astype(np.float64)
    n = len(ids)
    cfg = SimilarityConfig(normalize=normalize)
    score_fn = set_score_mean_agg if scorer == "mean" else set_score_single

    exhaustive = math.comb(n, x) <= budget
    if exhaustive and scorer == "mean":
        picked, _ = kernels.best_pooled_dot_combo(
            np.ascontiguousarray(rows), np.ascontiguousarray(article_vec), x, normalize
        )
        if picked[0] < 0:
            raise DegenerateInputError("every candidate combination pools to zero")
        chosen = [ids[int(i)] for i in picked]
        return chosen, score_fn(article_vec, rows[picked], cfg)

    if exhaustive:
        combos = _lex_combinations(n, x)
    else:
        rng = np.random.default_rng(seed)
        combos = (
            tuple(int(c) for c in np.sort(rng.choice(n, size=x, replace=False)))
            for _ in range(budget)
        )
    best_score = -math.inf
    best: tuple[int, ...] | None = None
    for combo in combos:
        try:
            score = score_fn(article_vec, rows[list(combo)], cfg)
        except DegenerateInputError:
            continue
        if best is None or score > best_score or (score == best_score and combo < best):
            best_score = score
            best = combo
    if best is None:
        raise DegenerateInputError("every candidate combination pools to zero")
    return [ids[i] for i in best], best_score


def _lex_combinations(n: int, k: int):
    from itertools import combinations

    return combinations(range(n), k)


def sentence_attribution(image_rows: np.ndarray, sentence_rows: np.ndarray,
                         cfg: SimilarityConfig) -> list[tuple[int, float]]:
    """Best-matching sentence (index, similarity) per image; ties go to
    the lowest index."""
    image_rows = np.atleast_2d(np.asarray(image_rows, dtype=np.float64))
    if image_rows.shape[0] == 0:
        raise DegenerateInputError("no images to attribute")
    return [milsim_sentence_sim(row, sentence_rows, cfg) for row in image_rows]


# ---------------------------------------------------------------------------
# article files and the end-to-end routine used by the CLI

@dataclass
class ArticleRequest:
    article_id: str
    text: str
    sentence_rows: np.ndarray


def load_article(path, text_matrix: EmbeddingMatrix | None = None) -> ArticleRequest:
    """Read an article JSON file.

    Requires "text" (or a "sentences" list of strings) for entity
    extraction, and sentence vectors as either inline
    "sentence_embeddings" or "sentence_ids" resolved against the pool's
    text matrix.  Encoding raw text is out of scope.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read article file {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise FormatError(f"article file {path} must hold a JSON object")
    text = payload.get("text") or " ".join(payload.get("sentences", []))
    if not text:
        raise FormatError(f"article file {path} has no text for entity extraction")
    if "sentence_embeddings" in payload:
        rows = np.asarray(payload["sentence_embeddings"], dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise FormatError("sentence_embeddings must be a non-empty 2-d array")
    elif "sentence_ids" in payload:
        if text_matrix is None:
            raise FormatError("sentence_ids given but no text matrix to resolve them")
        rows = text_matrix.take(payload["sentence_ids"])
    else:
        raise FormatError(
            f"article file {path} needs sentence_embeddings or sentence_ids"
        )
    return ArticleRequest(
        article_id=str(payload.get("article_id", path.stem)),
        text=text,
        sentence_rows=rows,
    )


def illustrate_article(request: ArticleRequest, image: EmbeddingMatrix,
                       text_head, image_head, x: int = 5,
                       scorer: str = "mean", budget: int = 10_000,
                       seed: int = 0, m_per_entity: int = 10,
                       lookup=None, attribution: bool = False,
                       temperature: float = 0.07) -> dict:
    """Full illustration pass: entities, candidate pool, best set, and
    optional per-image sentence attribution.  Returns a JSON-ready dict."""
    entities = extract_entities(request.text)
    if not entities:
        raise DegenerateInputError(
            f"article {request.article_id} has no capitalized entities"
        )
    if lookup is None:
        from .curation import HashedEntityEncoder

        lookup = EmbeddingLookupProvider(
            list(image.ids), image.data, HashedEntityEncoder(image.dim, seed=seed)
        )
    pool = candidate_pool_from_entities(entities, lookup, m_per_entity)

    projected = image_head.apply(image.take(sorted(pool.ids)))
    rows_by_id = EmbeddingMatrix(ids=sorted(pool.ids), data=projected)
    sentence_proj = text_head.apply(request.sentence_rows)
    article_vec = sentence_proj.mean(axis=0)

    chosen, score = best_image_set(
        article_vec, pool, rows_by_id, x=x, scorer=scorer, budget=budget, seed=seed
    )
    report = {
        "article_id": request.article_id,
        "entities": entities,
        "pool_size": pool.size,
        "x": x,
        "scorer": scorer,
        "chosen": chosen,
        "score": score,
        "attribution": None,
    }
    if attribution:
        cfg = SimilarityConfig(temperature=temperature, normalize=True)
        pairs = sentence_attribution(rows_by_id.take(chosen), sentence_proj, cfg)
        report["attribution"] = [
            {"image_id": cid, "sentence_index": idx, "score": s}
            for cid, (idx, s) in zip(chosen, pairs)
        ]
    return report
