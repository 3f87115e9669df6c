"""Dataset model and on-disk formats.

Two artifacts exist on disk:

* an embedding file: one ASCII header line ``EMBMAT1 <dtype> <rows> <dim>``
  followed by little-endian row-major raw values, and
* a UTF-8 JSON manifest tying stories to embedding rows.  Row identifiers
  live in the manifest (``text_ids`` / ``image_ids``, in row order), not in
  the binary file, so the binary payload round-trips byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = "EMBMAT1"

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


@dataclass
class EmbeddingMatrix:
    """Dense row-vector matrix with one string id per row."""

    ids: list[str]
    data: np.ndarray  # (rows, dim)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim != 2:
            raise FormatError("embedding data must be 2-D")
        if len(self.ids) != self.data.shape[0]:
            raise FormatError(
                f"{len(self.ids)} ids for {self.data.shape[0]} rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise FormatError("duplicate row id in embedding matrix")
        if not np.isfinite(self.data).all():
            raise FormatError("non-finite value in embedding matrix")
        self._index = {rid: i for i, rid in enumerate(self.ids)}

    def row(self, rid: str) -> np.ndarray:
        return self.data[self._index[rid]]

    def has(self, rid: str) -> bool:
        return rid in self._index

    def take(self, rids: list[str]) -> np.ndarray:
        """Rows for `rids`, in that order."""
        return self.data[[self._index[r] for r in rids]]


def save_embeddings(path: str | Path, matrix: EmbeddingMatrix, dtype: str = "float64") -> None:
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype tag {dtype!r}")
    header = f"{MAGIC} {dtype} {matrix.rows} {matrix.dim}\n"
    payload = np.ascontiguousarray(matrix.data, dtype=_DTYPES[dtype])
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.tobytes())


def load_embeddings(path: str | Path, ids: list[str], dim: int, dtype: str) -> EmbeddingMatrix:
    """Load a binary embedding file and attach row ids from the manifest.

    The header must agree with the manifest-declared shape and dtype, the
    payload must contain exactly rows*dim values, and every value must be
    finite.
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"embedding file not found: {path}")
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 4 or parts[0] != MAGIC:
            raise FormatError(f"bad embedding header: {header!r}")
        file_dtype, rows_s, dim_s = parts[1], parts[2], parts[3]
        if file_dtype not in _DTYPES:
            raise FormatError(f"unknown dtype tag {file_dtype!r}")
        if file_dtype != dtype:
            raise FormatError(f"dtype mismatch: file {file_dtype}, manifest {dtype}")
        rows, file_dim = int(rows_s), int(dim_s)
        if file_dim != dim:
            raise FormatError(f"dimension mismatch: file {file_dim}, manifest {dim}")
        if rows != len(ids):
            raise FormatError(f"row-count mismatch: file {rows}, manifest {len(ids)}")
        raw = fh.read()
    np_dtype = _DTYPES[file_dtype]
    expected = rows * dim * np_dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"payload size mismatch: {len(raw)} bytes, expected {expected}"
        )
    data = np.frombuffer(raw, dtype=np_dtype).reshape(rows, dim).astype(np.float64)
    if not np.isfinite(data).all():
        raise FormatError(f"non-finite value in {path}")
    return EmbeddingMatrix(ids=list(ids), data=data)


@dataclass
class Article:
    article_id: str
    channel: str
    title: str
    sentences: list[str]  # sentence ids resolving to text embedding rows
    publication_time: int = 0  # epoch seconds, used by the curation window


@dataclass
class Story:
    story_id: str
    articles: list[Article]
    image_ids: list[str]
    ground_truth_set: list[str] | None = None


@dataclass
class DatasetManifest:
    stories: list[Story]
    text_embedding_file: str
    image_embedding_file: str
    text_dim: int
    image_dim: int
    dtype: str
    text_ids: list[str] = field(default_factory=list)  # row order
    image_ids: list[str] = field(default_factory=list)  # row order
    synthetic: dict | None = None  # generator settings, for synthetic corpora

    @property
    def dim(self) -> int:
        if self.text_dim != self.image_dim:
            raise FormatError("text and image dims differ; use text_dim/image_dim")
        return self.text_dim


def _article_to_json(a: Article) -> dict:
    return {
        "article_id": a.article_id,
        "channel": a.channel,
        "title": a.title,
        "sentences": list(a.sentences),
        "publication_time": a.publication_time,
    }


def _story_to_json(s: Story) -> dict:
    out = {
        "story_id": s.story_id,
        "articles": [_article_to_json(a) for a in s.articles],
        "image_ids": list(s.image_ids),
    }
    if s.ground_truth_set is not None:
        out["ground_truth_set"] = list(s.ground_truth_set)
    return out


def manifest_to_json(m: DatasetManifest) -> dict:
    out = {
        "text_embedding_file": m.text_embedding_file,
        "image_embedding_file": m.image_embedding_file,
        "text_dim": m.text_dim,
        "image_dim": m.image_dim,
        "dtype": m.dtype,
        "text_ids": list(m.text_ids),
        "image_ids": list(m.image_ids),
        "stories": [_story_to_json(s) for s in m.stories],
    }
    if m.text_dim == m.image_dim:
        out["dim"] = m.text_dim
    if m.synthetic is not None:
        out["synthetic"] = m.synthetic
    return out


def manifest_from_json(obj: dict) -> DatasetManifest:
    try:
        text_dim = int(obj.get("text_dim", obj.get("dim")))
        image_dim = int(obj.get("image_dim", obj.get("dim")))
        stories = []
        for s in obj["stories"]:
            articles = [
                Article(
                    article_id=a["article_id"],
                    channel=a.get("channel", ""),
                    title=a.get("title", ""),
                    sentences=list(a["sentences"]),
                    publication_time=int(a.get("publication_time", 0)),
                )
                for a in s["articles"]
            ]
            stories.append(
                Story(
                    story_id=s["story_id"],
                    articles=articles,
                    image_ids=list(s["image_ids"]),
                    ground_truth_set=list(s["ground_truth_set"])
                    if "ground_truth_set" in s
                    else None,
                )
            )
        return DatasetManifest(
            stories=stories,
            text_embedding_file=obj["text_embedding_file"],
            image_embedding_file=obj["image_embedding_file"],
            text_dim=text_dim,
            image_dim=image_dim,
            dtype=obj["dtype"],
            text_ids=list(obj.get("text_ids", [])),
            image_ids=list(obj.get("image_ids", [])),
            synthetic=obj.get("synthetic"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad manifest: {exc}") from exc


def save_manifest(path: str | Path, m: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_to_json(m), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    return manifest_from_json(payload)


def load_corpus(manifest_path: str | Path):
    """Load a manifest plus both embedding files (paths resolved relative
    to the manifest)."""
    manifest_path = Path(manifest_path)
    m = load_manifest(manifest_path)
    base = manifest_path.parent
    text = load_embeddings(base / m.text_embedding_file, m.text_ids, m.text_dim, m.dtype)
    image = load_embeddings(base / m.image_embedding_file, m.image_ids, m.image_dim, m.dtype)
    return m, text, image


@dataclass
class ValidationIssue:
    kind: str  # broken_text_ref | broken_image_ref | duplicate_id | empty_article | empty_image_set
    subject: str
    detail: str


@dataclass
class ValidationReport:
    issues: list[ValidationIssue]

    @property
    def ok(self) -> bool:
        return not self.issues

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "issues": [
                {"kind": i.kind, "subject": i.subject, "detail": i.detail}
                for i in self.issues
            ],
        }


def validate_dataset(manifest: DatasetManifest) -> ValidationReport:
    """Report-only consistency check; never raises on bad content."""
    issues: list[ValidationIssue] = []

    def dup_check(ids, subject):
        seen = set()
        for x in ids:
            if x in seen:
                issues.append(ValidationIssue("duplicate_id", subject, x))
            seen.add(x)

    dup_check(manifest.text_ids, "text rows")
    dup_check(manifest.image_ids, "image rows")
    dup_check([s.story_id for s in manifest.stories], "stories")
    dup_check(
        [a.article_id for s in manifest.stories for a in s.articles], "articles"
    )
    text_rows = set(manifest.text_ids)
    image_rows = set(manifest.image_ids)
    for story in manifest.stories:
        dup_check(story.image_ids, f"story {story.story_id} images")
        if not story.image_ids:
            issues.append(
                ValidationIssue("empty_image_set", story.story_id, "no images")
            )
        for img in story.image_ids:
            if img not in image_rows:
                issues.append(
                    ValidationIssue("broken_image_ref", story.story_id, img)
                )
        if story.ground_truth_set is not None:
            member = set(story.image_ids)
            for img in story.ground_truth_set:
                if img not in member:
                    issues.append(
                        ValidationIssue(
                            "broken_image_ref",
                            story.story_id,
                            f"ground-truth id {img} not in story image set",
                        )
                    )
        for article in story.articles:
            if not article.sentences:
                issues.append(
                    ValidationIssue("empty_article", article.article_id, "no sentences")
                )
            for sid in article.sentences:
                if sid not in text_rows:
                    issues.append(
                        ValidationIssue("broken_text_ref", article.article_id, sid)
                    )
    return ValidationReport(issues)
