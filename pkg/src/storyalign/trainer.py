"""Training loop for the projection heads: Adam with linear warmup and
cosine decay, batches of stories with in-batch negatives, deterministic
checkpointing.

The base embeddings stay frozen throughout; the only learned parameters
are the two linear projection heads (and, for the probabilistic objective,
the variance heads plus its two sigmoid scalars).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape, finite_difference_check
from .dataio import DatasetManifest, EmbeddingMatrix, load_embeddings, save_embeddings
from .errors import ConfigError, DegenerateInputError, StoryAlignError
from .objectives import (
    BatchTensors,
    PcmeHead,
    SimilarityConfig,
    infonce_loss,
    milnce_loss,
    milsim_loss,
    pcme_loss,
    set_score_mean_agg,
)

OBJECTIVES = ("infonce", "milnce", "pcme", "milsim")


@dataclass
class ProjectionHead:
    """Linear map from frozen base space into the shared joint space."""

    weight: np.ndarray  # (D_base, D_joint)
    bias: np.ndarray    # (D_joint,)
    modality: str       # text | image

    def apply(self, rows: np.ndarray) -> np.ndarray:
        """Numpy-side application (evaluation; no gradients)."""
        return np.asarray(rows, dtype=np.float64) @ self.weight + self.bias


def init_head(base_dim: int, joint_dim: int, modality: str,
              rng: np.random.Generator, scheme: str = "auto") -> ProjectionHead:
    """Identity weights when the dims agree (start at the pretrained
    geometry), otherwise seeded Xavier-uniform.  scheme="xavier" forces a
    random weight regardless of shape, e.g. for untrained baselines."""
    if scheme not in ("auto", "identity", "xavier"):
        raise ConfigError(f"unknown init scheme {scheme!r}")
    if scheme == "identity" or (scheme == "auto" and base_dim == joint_dim):
        weight = np.eye(base_dim, joint_dim)
    else:
        bound = math.sqrt(6.0 / (base_dim + joint_dim))
        weight = rng.uniform(-bound, bound, size=(base_dim, joint_dim))
    return ProjectionHead(weight=weight, bias=np.zeros(joint_dim), modality=modality)


@dataclass
class OptimizerState:
    """Adam moments per parameter, in the same order as TrainState.params()."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "OptimizerState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])

    def update(self, params: list[np.ndarray], grads: list[np.ndarray],
               lr: float) -> None:
        self.step += 1
        t = self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    """Run settings.  The default schedule is sized for small corpora but
    keeps the conservative base_lr of large production runs; the
    ``desk_scale`` preset raises it so short synthetic runs converge."""

    objective: str = "milsim"
    base_lr: float = 1e-5
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 16
    lam: float = 0.1                       # image-sentence trade-off weight
    max_sentences_per_article: int = 64
    images_per_story_sample: int | str = "all"
    seed: int = 0
    joint_dim: int | None = None           # None -> text base dim
    temperature: float = 0.07
    normalize: bool = True
    pcme_k: int = 7
    pcme_alpha: float = 1.0
    pcme_beta: float = 0.0
    val_every: int = 0                     # 0 disables periodic validation
    val_splits: int = 5
    val_split_size: int = 20

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; pick one of {OBJECTIVES}")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ConfigError("need warmup_steps >= 0 and total_steps >= 1")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup cannot outlast the schedule")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.lam < 0:
            raise ConfigError("trade-off weight must be nonnegative")
        if self.max_sentences_per_article < 1:
            raise ConfigError("need at least one sentence per article")
        if self.images_per_story_sample != "all" and int(self.images_per_story_sample) < 1:
            raise ConfigError("images_per_story_sample must be 'all' or a positive count")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Preset for synthetic desk-scale corpora.

        The learning rate is far above the stock 1e-5: over a couple
        thousand Adam steps each coordinate moves at most roughly
        lr * steps, so 1e-5 cannot move randomly initialized projections
        into alignment.  3e-2 also gives the raw-dot article term of the
        set-level objective (whose extreme logits yield sparse early
        gradients) room to converge fully within 2000 steps.
        """
        cfg = cls(base_lr=3e-2)
        return replace(cfg, **overrides) if overrides else cfg

    def similarity(self) -> SimilarityConfig:
        return SimilarityConfig(temperature=self.temperature, normalize=self.normalize)

    def to_json(self) -> dict:
        out = {
            "objective": self.objective,
            "base_lr": self.base_lr,
            "warmup_steps": self.warmup_steps,
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "lambda": self.lam,
            "max_sentences_per_article": self.max_sentences_per_article,
            "images_per_story_sample": self.images_per_story_sample,
            "seed": self.seed,
            "joint_dim": self.joint_dim,
            "temperature": self.temperature,
            "normalize": self.normalize,
            "pcme_k": self.pcme_k,
            "pcme_alpha": self.pcme_alpha,
            "pcme_beta": self.pcme_beta,
            "val_every": self.val_every,
            "val_splits": self.val_splits,
            "val_split_size": self.val_split_size,
        }
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = dict(obj)
        if "lambda" in known:
            known["lam"] = known.pop("lambda")
        fields = {f for f in cls.__dataclass_fields__}
        unknown = set(known) - fields
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**known)
        cfg.validate()
        return cfg


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr over warmup_steps, then cosine decay to 0
    at total_steps.  Continuous at the warmup boundary."""
    w, t_total = cfg.warmup_steps, cfg.total_steps
    if step < 0 or step > t_total:
        raise ConfigError(f"step {step} outside schedule [0, {t_total}]")
    if step < w:
        return cfg.base_lr * (step + 1) / w
    if t_total == w:
        return 0.0 if step == t_total else cfg.base_lr
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (t_total - w)))


# ---------------------------------------------------------------------------
# batches

@dataclass
class BatchArrays:
    """Raw batch ingredients before projection: flat base rows plus the
    story index of each row."""

    sentences: np.ndarray
    images: np.ndarray
    sentence_story: np.ndarray
    image_story: np.ndarray
    pooled_text_base: np.ndarray  # (B, D_base) mean base sentence rows per story
    story_ids: list[str]


def usable_stories(manifest: DatasetManifest) -> list:
    """Stories with at least one non-empty article and one image."""
    out = []
    for story in manifest.stories:
        if story.image_ids and any(a.sentences for a in story.articles):
            out.append(story)
    return out


def build_batch(manifest: DatasetManifest, text: EmbeddingMatrix,
                image: EmbeddingMatrix, cfg: TrainConfig,
                rng: np.random.Generator) -> BatchArrays:
    """Sample batch_size distinct stories; per story one article (uniform)
    truncated to max_sentences_per_article, and an image subset per cfg."""
    stories = usable_stories(manifest)
    if len(stories) < cfg.batch_size:
        raise DegenerateInputError(
            f"need at least {cfg.batch_size} usable stories, have {len(stories)}"
        )
    picks = rng.choice(len(stories), size=cfg.batch_size, replace=False)
    sent_rows, img_rows, sent_story, img_story, pooled, ids = [], [], [], [], [], []
    for b, pick in enumerate(picks):
        story = stories[int(pick)]
        articles = [a for a in story.articles if a.sentences]
        article = articles[int(rng.integers(len(articles)))]
        sids = article.sentences[: cfg.max_sentences_per_article]
        rows = text.take(sids)
        sent_rows.append(rows)
        sent_story.append(np.full(len(sids), b, dtype=np.intp))
        pooled.append(rows.mean(axis=0))

        iids = story.image_ids
        if cfg.images_per_story_sample != "all":
            want = int(cfg.images_per_story_sample)
            if want < len(iids):
                chosen = np.sort(rng.choice(len(iids), size=want, replace=False))
                iids = [iids[int(c)] for c in chosen]
        if not iids:
            raise DegenerateInputError(f"story {story.story_id} has no usable images")
        img_rows.append(image.take(iids))
        img_story.append(np.full(len(iids), b, dtype=np.intp))
        ids.append(story.story_id)
    return BatchArrays(
        sentences=np.concatenate(sent_rows),
        images=np.concatenate(img_rows),
        sentence_story=np.concatenate(sent_story),
        image_story=np.concatenate(img_story),
        pooled_text_base=np.stack(pooled),
        story_ids=ids,
    )


# ---------------------------------------------------------------------------
# state

@dataclass
class TrainState:
    text_head: ProjectionHead
    image_head: ProjectionHead
    pcme: PcmeHead | None
    opt: OptimizerState
    rng: np.random.Generator
    step: int = 0
    log: list[dict] = field(default_factory=list)

    def params(self) -> list[tuple[str, np.ndarray]]:
        out = [
            ("text.weight", self.text_head.weight),
            ("text.bias", self.text_head.bias),
            ("image.weight", self.image_head.weight),
            ("image.bias", self.image_head.bias),
        ]
        if self.pcme is not None:
            out.extend(self.pcme.params())
        return out


def init_state(cfg: TrainConfig, text_dim: int, image_dim: int) -> TrainState:
    cfg.validate()
    joint = cfg.joint_dim if cfg.joint_dim is not None else text_dim
    rng = np.random.default_rng(cfg.seed)
    text_head = init_head(text_dim, joint, "text", rng)
    image_head = init_head(image_dim, joint, "image", rng)
    pcme = None
    if cfg.objective == "pcme":
        pcme = PcmeHead.create(text_dim, image_dim, joint, alpha=cfg.pcme_alpha,
                               beta=cfg.pcme_beta, k=cfg.pcme_k)
    state = TrainState(text_head=text_head, image_head=image_head, pcme=pcme,
                       opt=OptimizerState(m=[], v=[]), rng=rng)
    state.opt = OptimizerState.for_params([p for _, p in state.params()])
    return state


def train_step(state: TrainState, batch: BatchArrays, cfg: TrainConfig,
               step: int) -> float:
    """One forward/backward/Adam update.  Returns the loss value."""
    tape = Tape()
    w_t = tape.param(state.text_head.weight)
    b_t = tape.param(state.text_head.bias)
    w_i = tape.param(state.image_head.weight)
    b_i = tape.param(state.image_head.bias)
    param_nodes = [w_t, b_t, w_i, b_i]

    sent_base = tape.constant(batch.sentences)
    img_base = tape.constant(batch.images)
    sent_proj = tape.add_bias(tape.matmul(sent_base, w_t), b_t)
    img_proj = tape.add_bias(tape.matmul(img_base, w_i), b_i)

    if cfg.objective == "pcme":
        if state.pcme is None:
            raise ConfigError("train state has no probabilistic head")
        head = state.pcme
        alpha = tape.param(head.alpha)
        beta = tape.param(head.beta)
        wv_i = tape.param(head.image_logvar_weight)
        bv_i = tape.param(head.image_logvar_bias)
        wv_t = tape.param(head.text_logvar_weight)
        bv_t = tape.param(head.text_logvar_bias)
        param_nodes.extend([alpha, beta, wv_i, bv_i, wv_t, bv_t])

        pooled_base = tape.constant(batch.pooled_text_base)
        text_means = tape.add_bias(tape.matmul(pooled_base, w_t), b_t)
        img_logvar = tape.add_bias(tape.matmul(img_base, wv_i), bv_i)
        txt_logvar = tape.add_bias(tape.matmul(pooled_base, wv_t), bv_t)
        joint = state.text_head.weight.shape[1]
        eps_img = state.rng.standard_normal((head.k, batch.images.shape[0], joint))
        eps_txt = state.rng.standard_normal((head.k, batch.pooled_text_base.shape[0], joint))
        loss = pcme_loss(tape, img_proj, text_means, img_logvar, txt_logvar,
                         batch.image_story, alpha, beta, eps_img, eps_txt)
    else:
        tensors = BatchTensors.from_projected(
            tape, sent_proj, img_proj, batch.sentence_story, batch.image_story,
            batch.story_ids,
        )
        sim = cfg.similarity()
        if cfg.objective == "infonce":
            loss = infonce_loss(tensors, sim)
        elif cfg.objective == "milnce":
            loss = milnce_loss(tensors, sim)
        else:
            loss = milsim_loss(tensors, cfg.lam, sim)

    value = float(loss.value)
    if not np.isfinite(value):
        raise StoryAlignError(
            f"non-finite loss {value} at step {step} "
            f"(objective={cfg.objective}, lr={lr_at(step, cfg):g})"
        )
    tape.backward(loss)
    arrays = [p for _, p in state.params()]
    grads = [n.grad if n.grad is not None else np.zeros_like(n.value) for n in param_nodes]
    state.opt.update(arrays, grads, lr_at(step, cfg))
    return value


def validation_r1(state: TrainState, manifest: DatasetManifest,
                  text: EmbeddingMatrix, image: EmbeddingMatrix,
                  cfg: TrainConfig, step: int) -> float:
    """Mean R@1 over val_splits seeded random story subsets, scored with
    the pooled-mean set score under cosine.  Uses its own rng stream so the
    training trajectory is untouched."""
    from .retrieval_eval import rank_of_gt  # local import to avoid cycles elsewhere

    stories = usable_stories(manifest)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step, 0x5EED]))
    sim = SimilarityConfig(temperature=cfg.temperature, normalize=True)
    scores = []
    for _ in range(cfg.val_splits):
        size = min(cfg.val_split_size, len(stories))
        picks = rng.choice(len(stories), size=size, replace=False)
        subset = [stories[int(p)] for p in picks]
        image_sets = [state.image_head.apply(image.take(s.image_ids)) for s in subset]
        hits = total = 0
        for qi, story in enumerate(subset):
            for article in story.articles:
                if not article.sentences:
                    continue
                pooled = state.text_head.apply(
                    text.take(article.sentences[: cfg.max_sentences_per_article])
                ).mean(axis=0)
                row = np.array([
                    set_score_mean_agg(pooled, cand, sim) for cand in image_sets
                ])
                hits += rank_of_gt(row, qi) == 1
                total += 1
        scores.append(hits / total if total else 0.0)
    return float(np.mean(scores))


def train_loop(manifest: DatasetManifest, text: EmbeddingMatrix,
               image: EmbeddingMatrix, cfg: TrainConfig,
               state: TrainState | None = None,
               stop_at_step: int | None = None) -> TrainState:
    """Run the schedule from the state's current step to total_steps, or
    to stop_at_step for a staged run under the same schedule.

    Passing a reloaded checkpoint state resumes bit-identically: the rng,
    Adam moments, and step counter all round-trip through checkpoints.
    """
    cfg.validate()
    if state is None:
        state = init_state(cfg, text.dim, image.dim)
    until = cfg.total_steps if stop_at_step is None else min(stop_at_step, cfg.total_steps)
    while state.step < until:
        t = state.step
        batch = build_batch(manifest, text, image, cfg, state.rng)
        value = train_step(state, batch, cfg, t)
        record = {"step": t, "loss": value, "lr": lr_at(t, cfg)}
        state.step = t + 1
        if cfg.val_every > 0 and state.step % cfg.val_every == 0:
            record["val_r1"] = validation_r1(state, manifest, text, image, cfg, state.step)
        state.log.append(record)
    return state


# ---------------------------------------------------------------------------
# checkpoints: JSON header + parameter blocks in the embedding format

def _block_ids(n: int) -> list[str]:
    return [f"r{i:04d}" for i in range(n)]


def _write_block(path: Path, array: np.ndarray) -> None:
    mat = np.atleast_2d(np.asarray(array, dtype=np.float64))
    save_embeddings(path, EmbeddingMatrix(ids=_block_ids(mat.shape[0]), data=mat))


def _read_block(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    mat = np.atleast_2d(np.zeros(shape))
    loaded = load_embeddings(path, _block_ids(mat.shape[0]), mat.shape[1], "float64")
    return loaded.data.reshape(shape).copy()


def save_checkpoint(path: str | Path, state: TrainState, cfg: TrainConfig) -> None:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, (name, array) in enumerate(state.params()):
        stem = name.replace(".", "_")
        for suffix, block in (("", array), (".m", state.opt.m[i]), (".v", state.opt.v[i])):
            _write_block(path / "params" / f"{stem}{suffix}.emb", block)
        entries[name] = {"file": f"params/{stem}.emb", "shape": list(np.shape(array))}
    header = {
        "config": cfg.to_json(),
        "step": state.step,
        "optimizer": {
            "step": state.opt.step,
            "beta1": state.opt.beta1,
            "beta2": state.opt.beta2,
            "eps": state.opt.eps,
        },
        "rng_state": state.rng.bit_generator.state,
        "params": entries,
        "has_pcme_head": state.pcme is not None,
        "pcme_k": state.pcme.k if state.pcme is not None else None,
    }
    with open(path / "checkpoint.json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(path / "training_log.json", "w", encoding="utf-8") as fh:
        json.dump(state.log, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig]:
    path = Path(path)
    header_file = path / "checkpoint.json"
    if not header_file.exists():
        raise StoryAlignError(f"no checkpoint at {path}")
    with open(header_file, encoding="utf-8") as fh:
        header = json.load(fh)
    cfg = TrainConfig.from_json(header["config"])

    def block(name, shape):
        stem = name.replace(".", "_")
        return (
            _read_block(path / "params" / f"{stem}.emb", shape),
            _read_block(path / "params" / f"{stem}.m.emb", shape),
            _read_block(path / "params" / f"{stem}.v.emb", shape),
        )

    entries = header["params"]

    def shaped(name):
        return tuple(entries[name]["shape"])

    tw, tw_m, tw_v = block("text.weight", shaped("text.weight"))
    tb, tb_m, tb_v = block("text.bias", shaped("text.bias"))
    iw, iw_m, iw_v = block("image.weight", shaped("image.weight"))
    ib, ib_m, ib_v = block("image.bias", shaped("image.bias"))
    text_head = ProjectionHead(weight=tw, bias=tb, modality="text")
    image_head = ProjectionHead(weight=iw, bias=ib, modality="image")
    moments_m = [tw_m, tb_m, iw_m, ib_m]
    moments_v = [tw_v, tb_v, iw_v, ib_v]

    pcme = None
    if header.get("has_pcme_head"):
        values = {}
        for name in ("pcme.alpha", "pcme.beta", "pcme.image_logvar.weight",
                     "pcme.image_logvar.bias", "pcme.text_logvar.weight",
                     "pcme.text_logvar.bias"):
            p, m, v = block(name, shaped(name))
            values[name] = p
            moments_m.append(m)
            moments_v.append(v)
        pcme = PcmeHead(
            alpha=values["pcme.alpha"],
            beta=values["pcme.beta"],
            k=int(header["pcme_k"]),
            image_logvar_weight=values["pcme.image_logvar.weight"],
            image_logvar_bias=values["pcme.image_logvar.bias"],
            text_logvar_weight=values["pcme.text_logvar.weight"],
            text_logvar_bias=values["pcme.text_logvar.bias"],
        )

    opt = OptimizerState(
        m=moments_m,
        v=moments_v,
        step=int(header["optimizer"]["step"]),
        beta1=float(header["optimizer"]["beta1"]),
        beta2=float(header["optimizer"]["beta2"]),
        eps=float(header["optimizer"]["eps"]),
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]

    log_file = path / "training_log.json"
    log = []
    if log_file.exists():
        with open(log_file, encoding="utf-8") as fh:
            log = json.load(fh)
    state = TrainState(text_head=text_head, image_head=image_head, pcme=pcme,
                       opt=opt, rng=rng, step=int(header["step"]), log=log)
    return state, cfg


# ---------------------------------------------------------------------------
# gradient checking against central finite differences

def _check_batch(rng: np.random.Generator) -> dict:
    """Small random batch in the flat layout, plus head parameters.

    Temperature 0.2 keeps the contrastive exponents mild enough that the
    h=1e-4 central difference stays well inside truncation error.
    """
    b = int(rng.integers(2, 5))
    d_base = int(rng.integers(4, 7))
    joint = int(rng.integers(3, 6))
    n_sent = rng.integers(1, 5, size=b)
    n_img = rng.integers(1, 4, size=b)
    sentence_story = np.repeat(np.arange(b), n_sent)
    image_story = np.repeat(np.arange(b), n_img)
    return {
        "story_ids": [f"s{i}" for i in range(b)],
        "sentence_story": sentence_story,
        "image_story": image_story,
        "sentences": rng.standard_normal((sentence_story.size, d_base)),
        "images": rng.standard_normal((image_story.size, d_base)),
        "heads": [
            rng.standard_normal((d_base, joint)) * 0.5,
            rng.standard_normal(joint) * 0.1,
            rng.standard_normal((d_base, joint)) * 0.5,
            rng.standard_normal(joint) * 0.1,
        ],
        "d_base": d_base,
        "joint": joint,
    }


def _objective_fd_error(objective: str, rng: np.random.Generator,
                        h: float) -> float:
    data = _check_batch(rng)
    sim = SimilarityConfig(temperature=0.2, normalize=True)
    lam = 0.5

    if objective != "pcme":
        def builder(tape, nodes):
            w_t, b_t, w_i, b_i = nodes
            sent = tape.add_bias(tape.matmul(tape.constant(data["sentences"]), w_t), b_t)
            img = tape.add_bias(tape.matmul(tape.constant(data["images"]), w_i), b_i)
            tensors = BatchTensors.from_projected(
                tape, sent, img, data["sentence_story"], data["image_story"],
                data["story_ids"],
            )
            if objective == "infonce":
                return infonce_loss(tensors, sim)
            if objective == "milnce":
                return milnce_loss(tensors, sim)
            return milsim_loss(tensors, lam, sim)

        return finite_difference_check(builder, data["heads"], h=h)

    b = len(data["story_ids"])
    joint = data["joint"]
    d_base = data["d_base"]
    k = 2
    alpha = np.asarray(1.0 + 0.2 * abs(rng.standard_normal()))
    beta = np.asarray(0.1 * rng.standard_normal())
    logvar_heads = [
        rng.standard_normal((d_base, joint)) * 0.1,
        rng.standard_normal(joint) * 0.1 - 2.0,
        rng.standard_normal((d_base, joint)) * 0.1,
        rng.standard_normal(joint) * 0.1 - 2.0,
    ]
    starts = np.flatnonzero(np.r_[True, np.diff(data["sentence_story"]) != 0])
    counts = np.diff(np.r_[starts, data["sentence_story"].size])
    pooled_base = np.add.reduceat(data["sentences"], starts, axis=0) / counts[:, None]
    eps_img = rng.standard_normal((k, data["images"].shape[0], joint))
    eps_txt = rng.standard_normal((k, b, joint))

    def builder(tape, nodes):
        w_t, b_t, w_i, b_i, a_node, beta_node, wv_i, bv_i, wv_t, bv_t = nodes
        img = tape.add_bias(tape.matmul(tape.constant(data["images"]), w_i), b_i)
        pooled = tape.constant(pooled_base)
        text_means = tape.add_bias(tape.matmul(pooled, w_t), b_t)
        img_logvar = tape.add_bias(tape.matmul(tape.constant(data["images"]), wv_i), bv_i)
        txt_logvar = tape.add_bias(tape.matmul(pooled, wv_t), bv_t)
        return pcme_loss(tape, img, text_means, img_logvar, txt_logvar,
                         data["image_story"], a_node, beta_node, eps_img, eps_txt)

    params = data["heads"] + [alpha, beta] + logvar_heads
    return finite_difference_check(builder, params, h=h)


def gradient_check_report(seed: int = 7, batches: int = 20, h: float = 1e-4,
                          tolerance: float = 1e-4) -> dict:
    """Max relative error between analytic and central-difference gradients
    for every objective, over `batches` seeded random batches each.

    Gradients are taken w.r.t. both projection heads, plus the sigmoid
    scalars and log-variance heads for the probabilistic objective.
    """
    if batches < 1:
        raise ConfigError("need at least one batch per objective")
    report: dict = {"losses": {}, "tolerance": tolerance, "batches": batches}
    for objective in OBJECTIVES:
        rng = np.random.default_rng(np.random.SeedSequence([seed, OBJECTIVES.index(objective)]))
        worst = 0.0
        for _ in range(batches):
            worst = max(worst, _objective_fd_error(objective, rng, h))
        report["losses"][objective] = worst
    report["max_relative_error"] = max(report["losses"].values())
    report["ok"] = report["max_relative_error"] < tolerance
    return report
