"""Corpus curation: channel filtering, windowed agglomerative story
clustering, entity-based cluster merging, and diverse ground-truth
image-set selection.

Entity detection and entity encoding are external concerns in production;
here they are pluggable callables with deterministic synthetic defaults so
the pipeline runs end to end without network services.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .dataio import DatasetManifest, EmbeddingMatrix, Story
from .errors import ConfigError, DegenerateInputError, StoryAlignError

SECONDS_PER_DAY = 86_400


@dataclass
class DocumentVector:
    article_id: str
    publication_time: int
    vector: np.ndarray
    channel: str


@dataclass
class EntityTagSet:
    """Lowercased, deduplicated tags attached to an image or cluster."""

    owner: str
    tags: set[str]

    def __post_init__(self):
        self.tags = {t.lower() for t in self.tags}


@dataclass
class ClusterNode:
    cluster_id: str
    members: list[str]            # article ids, sorted
    centroid: np.ndarray          # mean of member document vectors
    entity_pool: np.ndarray | None = None
    window: int = 0


def docs_from_corpus(manifest: DatasetManifest, text: EmbeddingMatrix) -> list[DocumentVector]:
    """One document vector per article: the mean of its sentence rows.
    Articles without sentences are skipped (they cannot be represented)."""
    docs = []
    for story in manifest.stories:
        for article in story.articles:
            if not article.sentences:
                continue
            docs.append(DocumentVector(
                article_id=article.article_id,
                publication_time=article.publication_time,
                vector=text.take(article.sentences).mean(axis=0),
                channel=article.channel,
            ))
    return docs


def filter_channels(articles, allowlist) -> list:
    """Keep items whose .channel is in the allowlist, preserving order."""
    allowlist = set(allowlist)
    if not allowlist:
        raise ConfigError("channel allowlist must not be empty")
    return [a for a in articles if a.channel in allowlist]


# ---------------------------------------------------------------------------
# agglomerative clustering

def _cosine_distances(vectors: np.ndarray, owners: list[str]) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise DegenerateInputError(
            f"zero vector cannot enter cosine clustering ({owners[zero[0]]})"
        )
    unit = vectors / norms[:, None]
    d = 1.0 - unit @ unit.T
    np.fill_diagonal(d, 0.0)
    return np.ascontiguousarray((d + d.T) / 2.0)  # exact symmetry for the scan


def _merge_loop(dist: np.ndarray, sizes: np.ndarray, threshold: float,
                linkage: str) -> list[list[int]]:
    """Iteratively merge the closest pair while its distance is strictly
    below the threshold.  Returns member index lists.

    Ties take the pair whose (sorted) member ranks are lexicographically
    smallest; slots keep the smaller rank on merge, so ranks equal the
    minimum original index of the cluster.
    """
    n = dist.shape[0]
    keys = np.arange(n, dtype=np.int64)
    active = np.ones(n, dtype=np.uint8)
    members: list[list[int]] = [[i] for i in range(n)]
    sizes = sizes.astype(np.float64).copy()
    remaining = n
    while remaining >= 2:
        i, j = kernels.nearest_active_pair(dist, keys, active)
        if not dist[i, j] < threshold:
            break
        if linkage == "average":
            new_row = (sizes[i] * dist[i, :] + sizes[j] * dist[j, :]) / (sizes[i] + sizes[j])
        else:
            new_row = np.maximum(dist[i, :], dist[j, :])
        dist[i, :] = new_row
        dist[:, i] = new_row
        dist[i, i] = 0.0
        sizes[i] += sizes[j]
        keys[i] = min(keys[i], keys[j])
        members[i].extend(members[j])
        members[j] = []
        active[j] = 0
        remaining -= 1
    return [sorted(m) for m in members if m]


def agglomerative_cluster(docs: list[DocumentVector], window_days: int,
                          distance_threshold: float,
                          linkage: str = "average") -> list[ClusterNode]:
    """Cluster documents within non-overlapping publication-time windows
    under cosine distance, merging while the closest pair is strictly
    below the threshold."""
    if not docs:
        raise DegenerateInputError("no documents to cluster")
    if linkage not in ("average", "complete"):
        raise ConfigError(f"linkage must be average or complete, got {linkage!r}")
    if not 0.0 <= distance_threshold <= 2.0:
        raise ConfigError("cosine distance threshold must lie in [0, 2]")
    if window_days < 1:
        raise ConfigError("window_days must be positive")

    span = window_days * SECONDS_PER_DAY
    windows: dict[int, list[DocumentVector]] = {}
    for doc in docs:
        windows.setdefault(math.floor(doc.publication_time / span), []).append(doc)

    clusters: list[ClusterNode] = []
    counter = 0
    for w in sorted(windows):
        bucket = sorted(windows[w], key=lambda d: d.article_id)
        ids = [d.article_id for d in bucket]
        vectors = np.stack([d.vector for d in bucket]).astype(np.float64)
        dist = _cosine_distances(vectors, ids)
        groups = _merge_loop(dist, np.ones(len(bucket)), distance_threshold, linkage)
        groups.sort(key=lambda g: ids[g[0]])
        for g in groups:
            clusters.append(ClusterNode(
                cluster_id=f"c{counter:05d}",
                members=[ids[i] for i in g],
                centroid=vectors[g].mean(axis=0),
                window=w,
            ))
            counter += 1
    return clusters


def entity_merge(clusters: list[ClusterNode], merge_threshold: float,
                 linkage: str = "average") -> list[ClusterNode]:
    """Second agglomerative pass over entity-pool vectors.  Clusters
    without entities (zero pools) pass through unmerged.  Never increases
    the cluster count."""
    if linkage not in ("average", "complete"):
        raise ConfigError(f"linkage must be average or complete, got {linkage!r}")
    for c in clusters:
        if c.entity_pool is None:
            raise StoryAlignError(f"cluster {c.cluster_id} has no entity pool")
    order = sorted(range(len(clusters)), key=lambda i: clusters[i].members[0])
    poolable = [i for i in order if np.linalg.norm(clusters[i].entity_pool) > 0.0]
    skipped = [clusters[i] for i in order if i not in set(poolable)]

    merged: list[ClusterNode] = []
    if poolable:
        vectors = np.stack([clusters[i].entity_pool for i in poolable]).astype(np.float64)
        dist = _cosine_distances(vectors, [clusters[i].cluster_id for i in poolable])
        groups = _merge_loop(dist, np.ones(len(poolable)), merge_threshold, linkage)
        for g in groups:
            parts = [clusters[poolable[i]] for i in g]
            weights = np.array([len(p.members) for p in parts], dtype=np.float64)
            centroid = np.average([p.centroid for p in parts], axis=0, weights=weights)
            pool = np.average([p.entity_pool for p in parts], axis=0, weights=weights)
            merged.append(ClusterNode(
                cluster_id="",
                members=sorted(m for p in parts for m in p.members),
                centroid=centroid,
                entity_pool=pool,
                window=min(p.window for p in parts),
            ))
    merged.extend(replace(c, cluster_id="") for c in skipped)
    merged.sort(key=lambda c: c.members[0])
    return [replace(c, cluster_id=f"c{i:05d}") for i, c in enumerate(merged)]


# ---------------------------------------------------------------------------
# entity providers (deterministic stand-ins for external services)

def _stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


class HashedEntityEncoder:
    """Maps an entity string to a fixed unit vector drawn from a seeded
    hash, standing in for a learned entity encoder."""

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ConfigError("encoder dimension must be positive")
        self.dim = dim
        self.seed = seed

    def __call__(self, tag: str) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, _stable_int(tag.lower())]))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


_TAG_VOCAB = (
    "crowd", "flag", "podium", "river", "skyline", "stadium", "convoy",
    "courtroom", "harbor", "market", "parliament", "rally", "glacier",
    "refinery", "orchard", "airfield", "monument", "ballot", "barricade",
    "telescope", "vineyard", "locomotive", "lighthouse", "observatory",
)


class SyntheticTagProvider:
    """Deterministic tags for any owner id, standing in for an external
    entity detector."""

    def __init__(self, seed: int = 0, vocab: tuple[str, ...] = _TAG_VOCAB,
                 tags_per_item: int = 3):
        if tags_per_item < 1 or tags_per_item > len(vocab):
            raise ConfigError("tags_per_item must be in [1, len(vocab)]")
        self.seed = seed
        self.vocab = vocab
        self.tags_per_item = tags_per_item

    def __call__(self, owner_id: str) -> list[str]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, _stable_int(owner_id)]))
        picks = rng.choice(len(self.vocab), size=self.tags_per_item, replace=False)
        return [self.vocab[int(p)] for p in sorted(picks)]


class MappingTagProvider:
    """Tags straight from a dict; unknown owners get none."""

    def __init__(self, mapping: dict[str, list[str]]):
        self.mapping = dict(mapping)

    def __call__(self, owner_id: str) -> list[str]:
        return list(self.mapping.get(owner_id, []))


def attach_entity_pools(clusters: list[ClusterNode], tag_provider,
                        encoder: HashedEntityEncoder) -> list[ClusterNode]:
    """Fill each cluster's entity-pool vector: the mean over all entity
    representations of all member articles (multiset, no dedup).  Clusters
    without any tags get a zero pool."""
    out = []
    for c in clusters:
        vectors = [encoder(t) for m in c.members for t in tag_provider(m)]
        pool = np.mean(vectors, axis=0) if vectors else np.zeros(encoder.dim)
        out.append(replace(c, entity_pool=pool))
    return out


# ---------------------------------------------------------------------------
# diverse ground-truth selection

def _tag_masks(tagsets: list[EntityTagSet]) -> np.ndarray:
    universe = sorted({t for ts in tagsets for t in ts.tags})
    position = {t: i for i, t in enumerate(universe)}
    words = max(1, -(-len(universe) // 64))
    masks = np.zeros((len(tagsets), words), dtype=np.uint64)
    for row, ts in enumerate(tagsets):
        for t in ts.tags:
            p = position[t]
            masks[row, p // 64] |= np.uint64(1 << (p % 64))
    return masks


def _mask_ints(masks: np.ndarray) -> list[int]:
    return [int.from_bytes(row.tobytes(), "little") for row in np.ascontiguousarray(masks)]


def select_diverse_set(tagsets: list[EntityTagSet], k: int,
                       budget: int = 10_000, seed: int = 0) -> list[str]:
    """The k-combination of owners minimizing the size of the tag
    intersection.

    Exhaustive (lexicographic over sorted owner ids) when C(n, k) fits the
    budget, otherwise a seeded sample of `budget` combinations.  Ties keep
    the lexicographically smallest id tuple.
    """
    if k < 1:
        raise ConfigError("set size k must be positive")
    if len(tagsets) < k:
        raise DegenerateInputError(
            f"pool of {len(tagsets)} images cannot yield a set of {k}"
        )
    tagsets = sorted(tagsets, key=lambda ts: ts.owner)
    ids = [ts.owner for ts in tagsets]
    masks = _tag_masks(tagsets)
    n = len(tagsets)
    if math.comb(n, k) <= budget:
        picked = kernels.min_intersection_combo(masks, k)
        return [ids[int(i)] for i in picked]
    ints = _mask_ints(masks)
    rng = np.random.default_rng(seed)
    best_count = -1
    best: tuple[int, ...] | None = None
    for _ in range(budget):
        combo = tuple(int(c) for c in np.sort(rng.choice(n, size=k, replace=False)))
        inter = ints[combo[0]]
        for idx in combo[1:]:
            inter &= ints[idx]
        count = inter.bit_count()
        if best is None or count < best_count or (count == best_count and combo < best):
            best_count = count
            best = combo
    return [ids[i] for i in best]


# ---------------------------------------------------------------------------
# manifest plumbing for the pipeline

def clustered_manifest(manifest: DatasetManifest,
                       clusters: list[ClusterNode]) -> DatasetManifest:
    """Regroup the corpus by cluster: each cluster becomes a story whose
    articles are its members and whose images are the union (sorted) of
    the members' original story images."""
    article_home = {}
    article_obj = {}
    for story in manifest.stories:
        for a in story.articles:
            article_home[a.article_id] = story
            article_obj[a.article_id] = a
    stories = []
    for c in clusters:
        images = sorted({iid for m in c.members for iid in article_home[m].image_ids})
        stories.append(Story(
            story_id=c.cluster_id,
            articles=[article_obj[m] for m in c.members],
            image_ids=images,
            ground_truth_set=None,
        ))
    return replace(manifest, stories=stories)


def build_eval_set(manifest: DatasetManifest, k: int = 5, min_images: int = 5,
                   count: int | None = None, budget: int = 10_000,
                   seed: int = 0, tag_provider=None) -> DatasetManifest:
    """Curate evaluation stories: a seeded selection of `count` stories
    with at least min_images images, each given a diverse ground-truth set
    of k images."""
    provider = tag_provider if tag_provider is not None else SyntheticTagProvider(seed)
    qualifying = [s for s in manifest.stories if len(s.image_ids) >= min_images]
    want = len(qualifying) if count is None else count
    if want < 1 or len(qualifying) < want:
        raise DegenerateInputError(
            f"need {want} stories with at least {min_images} images, have {len(qualifying)}"
        )
    rng = np.random.default_rng(seed)
    if want < len(qualifying):
        picks = sorted(rng.choice(len(qualifying), size=want, replace=False))
        qualifying = [qualifying[int(p)] for p in picks]
    curated = []
    for story in qualifying:
        tagsets = [EntityTagSet(owner=iid, tags=set(provider(iid))) for iid in story.image_ids]
        gt = select_diverse_set(tagsets, k=k, budget=budget, seed=seed)
        curated.append(replace(story, ground_truth_set=gt))
    return replace(manifest, stories=curated)
