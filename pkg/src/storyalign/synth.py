"""Seeded synthetic corpus generator.

Each story draws a latent vector; its sentence and image embeddings are two
different fixed random linear maps applied to noisy copies of that latent.
Matched sentence/image pairs therefore share latent structure while
cross-story pairs do not, which is enough to exercise training, curation
and retrieval end to end without any external encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .dataio import (
    Article,
    DatasetManifest,
    EmbeddingMatrix,
    Story,
    save_embeddings,
    save_manifest,
)
from .errors import ConfigError

_CHANNELS = (
    "wire-one",
    "daily-ledger",
    "metro-times",
    "the-bulletin",
    "evening-post",
    "coast-herald",
)

# Publication times: stories land on random days in a four-week span,
# articles within a story scatter over a few hours.
_EPOCH_BASE = 1_600_000_000
_SPAN_DAYS = 28


@dataclass(frozen=True)
class SyntheticGenConfig:
    num_stories: int = 20
    images_per_story: int = 5
    sentences_per_article: int = 8
    articles_per_story: int = 2
    latent_dim: int = 16
    text_dim: int = 32
    image_dim: int = 32
    noise_scale: float = 0.1
    # Spread of the per-image aspect latents around the story core.  Each
    # image depicts one aspect and each sentence blends the core with one
    # aspect, so a single image is a partial view of the story while the
    # pooled set recovers it.
    aspect_spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        counts = (
            self.num_stories,
            self.images_per_story,
            self.sentences_per_article,
            self.articles_per_story,
            self.latent_dim,
            self.text_dim,
            self.image_dim,
        )
        if any(c < 1 for c in counts):
            raise ConfigError("all synthetic counts must be >= 1")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if self.aspect_spread < 0:
            raise ConfigError("aspect_spread must be >= 0")


@dataclass
class SyntheticCorpus:
    manifest: DatasetManifest
    text: EmbeddingMatrix
    image: EmbeddingMatrix
    # Noisy latents behind each row, kept for diagnostics/tests only.
    text_latents: np.ndarray
    image_latents: np.ndarray
    text_row_story: list[int]
    image_row_story: list[int]


def generate_synthetic_corpus(cfg: SyntheticGenConfig) -> SyntheticCorpus:
    """Pure function of `cfg`: the same config yields bit-identical output."""
    rng = np.random.default_rng(cfg.seed)
    text_map = rng.standard_normal((cfg.text_dim, cfg.latent_dim))
    image_map = rng.standard_normal((cfg.image_dim, cfg.latent_dim))

    stories: list[Story] = []
    text_ids: list[str] = []
    image_ids: list[str] = []
    text_rows: list[np.ndarray] = []
    image_rows: list[np.ndarray] = []
    text_latents: list[np.ndarray] = []
    image_latents: list[np.ndarray] = []
    text_row_story: list[int] = []
    image_row_story: list[int] = []

    for s in range(cfg.num_stories):
        latent = rng.standard_normal(cfg.latent_dim)
        aspects = latent[None, :] + cfg.aspect_spread * rng.standard_normal(
            (cfg.images_per_story, cfg.latent_dim)
        )
        story_day = int(rng.integers(0, _SPAN_DAYS))
        base_time = _EPOCH_BASE + story_day * 86400
        articles = []
        for a in range(cfg.articles_per_story):
            channel = _CHANNELS[int(rng.integers(0, len(_CHANNELS)))]
            offset = int(rng.integers(0, 6 * 3600))
            sentence_ids = []
            for j in range(cfg.sentences_per_article):
                # Round-robin over aspects so every facet gets text coverage.
                aspect = aspects[j % cfg.images_per_story]
                noisy = (0.5 * (latent + aspect)
                         + cfg.noise_scale * rng.standard_normal(cfg.latent_dim))
                sid = f"s{s:04d}_{a:02d}_{j:02d}"
                sentence_ids.append(sid)
                text_ids.append(sid)
                text_rows.append(text_map @ noisy)
                text_latents.append(noisy)
                text_row_story.append(s)
            articles.append(
                Article(
                    article_id=f"a{s:04d}_{a:02d}",
                    channel=channel,
                    title=f"story {s} dispatch {a}",
                    sentences=sentence_ids,
                    publication_time=base_time + offset,
                )
            )
        story_images = []
        for i in range(cfg.images_per_story):
            noisy = aspects[i] + cfg.noise_scale * rng.standard_normal(cfg.latent_dim)
            iid = f"img{s:04d}_{i:02d}"
            story_images.append(iid)
            image_ids.append(iid)
            image_rows.append(image_map @ noisy)
            image_latents.append(noisy)
            image_row_story.append(s)
        stories.append(
            # The generator knows the true correspondence, so the full image
            # set doubles as the retrieval ground truth.
            Story(
                story_id=f"story_{s:04d}",
                articles=articles,
                image_ids=story_images,
                ground_truth_set=list(story_images),
            )
        )

    manifest = DatasetManifest(
        stories=stories,
        text_embedding_file="text.emb",
        image_embedding_file="image.emb",
        text_dim=cfg.text_dim,
        image_dim=cfg.image_dim,
        dtype="float64",
        text_ids=text_ids,
        image_ids=image_ids,
        synthetic={
            "config": asdict(cfg),
            "text_map": text_map.tolist(),
            "image_map": image_map.tolist(),
        },
    )
    return SyntheticCorpus(
        manifest=manifest,
        text=EmbeddingMatrix(ids=text_ids, data=np.array(text_rows)),
        image=EmbeddingMatrix(ids=image_ids, data=np.array(image_rows)),
        text_latents=np.array(text_latents),
        image_latents=np.array(image_latents),
        text_row_story=text_row_story,
        image_row_story=image_row_story,
    )


def write_corpus(corpus: SyntheticCorpus, out_dir: str | Path) -> Path:
    """Write manifest.json plus both embedding files; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = corpus.manifest
    save_embeddings(out_dir / m.text_embedding_file, corpus.text, m.dtype)
    save_embeddings(out_dir / m.image_embedding_file, corpus.image, m.dtype)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest_path, m)
    return manifest_path
