"""Command-line entry point.

Imports of numpy-backed modules happen inside the subcommand handlers so
the thread cap (``--threads`` or STORYALIGN_THREADS) lands in the
environment before any BLAS library initializes.

Every subcommand that resolves an output directory (``--out`` or the
STORYALIGN_OUT variable) writes a ``run_manifest.json`` there: command,
fully resolved config, seed, version, and sha256 checksums of the inputs.
Nothing in any artifact depends on wall-clock time, so fixed seeds give
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
from pathlib import Path

from . import __version__

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _apply_thread_cap(threads: int | None) -> None:
    value = threads if threads is not None else os.environ.get("STORYALIGN_THREADS")
    if value is None:
        return
    for var in _THREAD_VARS:
        os.environ[var] = str(value)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _resolve_out(args, required: bool) -> Path | None:
    out = args.out or os.environ.get("STORYALIGN_OUT")
    if out is None:
        if required:
            from .errors import ConfigError

            raise ConfigError(
                f"{args.command} needs an output directory (--out or STORYALIGN_OUT)"
            )
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_run_manifest(out_dir: Path, command: str, config: dict, seed,
                        inputs: dict[str, Path], outputs: list[str]) -> None:
    payload = {
        "command": command,
        "config": config,
        "inputs": {name: _sha256(p) for name, p in sorted(inputs.items())},
        "outputs": sorted(outputs),
        "seed": seed,
        "version": __version__,
    }
    _dump_json(out_dir / "run_manifest.json", payload)


def _copy_embeddings(manifest, src_dir: Path, out_dir: Path) -> list[str]:
    names = [manifest.text_embedding_file, manifest.image_embedding_file]
    for name in names:
        if (out_dir / name).resolve() != (src_dir / name).resolve():
            shutil.copyfile(src_dir / name, out_dir / name)
    return names


def _data_manifest_path(data: str) -> Path:
    path = Path(data)
    return path if path.is_file() else path / "manifest.json"


# ---------------------------------------------------------------------------
# subcommands

def _cmd_synth(args) -> int:
    from dataclasses import asdict

    from .synth import SyntheticGenConfig, generate_synthetic_corpus, write_corpus

    out_dir = _resolve_out(args, required=True)
    cfg = SyntheticGenConfig(
        num_stories=args.stories,
        images_per_story=args.images_per_story,
        sentences_per_article=args.sentences_per_article,
        articles_per_story=args.articles_per_story,
        latent_dim=args.latent_dim,
        text_dim=args.dim,
        image_dim=args.dim,
        noise_scale=args.noise,
        aspect_spread=args.aspect_spread,
        seed=args.seed,
    )
    corpus = generate_synthetic_corpus(cfg)
    manifest_path = write_corpus(corpus, out_dir)
    outputs = ["manifest.json", corpus.manifest.text_embedding_file,
               corpus.manifest.image_embedding_file]
    _write_run_manifest(out_dir, "synth", asdict(cfg), cfg.seed, {}, outputs)
    print(f"wrote {len(corpus.manifest.stories)} stories to {manifest_path}")
    return 0


def _cmd_ingest(args) -> int:
    from .dataio import load_corpus, validate_dataset

    manifest_path = _data_manifest_path(args.data)
    manifest, _, _ = load_corpus(manifest_path)
    report = validate_dataset(manifest)
    out_dir = _resolve_out(args, required=False)
    if out_dir is not None:
        _dump_json(out_dir / "validation_report.json", report.to_json())
        _write_run_manifest(out_dir, "ingest", {"data": str(args.data)}, None,
                            {"manifest": manifest_path},
                            ["validation_report.json"])
    if not report.ok:
        print(json.dumps(report.to_json(), indent=1, sort_keys=True), file=sys.stderr)
        return 1
    print(f"ok: {len(manifest.stories)} stories, "
          f"{len(manifest.text_ids)} text rows, {len(manifest.image_ids)} image rows")
    return 0


_LINKAGE = {"avg": "average", "average": "average", "complete": "complete"}


def _cmd_cluster(args) -> int:
    from .curation import (
        HashedEntityEncoder,
        SyntheticTagProvider,
        agglomerative_cluster,
        attach_entity_pools,
        clustered_manifest,
        docs_from_corpus,
        entity_merge,
        filter_channels,
    )
    from .dataio import load_corpus, save_manifest

    out_dir = _resolve_out(args, required=True)
    manifest_path = _data_manifest_path(args.data)
    manifest, text, _ = load_corpus(manifest_path)
    docs = docs_from_corpus(manifest, text)
    if args.channels:
        docs = filter_channels(docs, args.channels.split(","))
    linkage = _LINKAGE[args.linkage]
    clusters = agglomerative_cluster(docs, args.window_days, args.threshold, linkage)
    if args.entity_threshold is not None:
        clusters = attach_entity_pools(
            clusters,
            SyntheticTagProvider(args.seed),
            HashedEntityEncoder(args.entity_dim, args.seed),
        )
        clusters = entity_merge(clusters, args.entity_threshold, linkage)

    clustered = clustered_manifest(manifest, clusters)
    save_manifest(out_dir / "manifest.json", clustered)
    emb_names = _copy_embeddings(manifest, manifest_path.parent, out_dir)
    summary = {
        c.cluster_id: {"members": c.members, "window": c.window} for c in clusters
    }
    _dump_json(out_dir / "clusters.json", summary)
    config = {
        "channels": args.channels,
        "data": str(args.data),
        "entity_dim": args.entity_dim,
        "entity_threshold": args.entity_threshold,
        "linkage": linkage,
        "threshold": args.threshold,
        "window_days": args.window_days,
    }
    _write_run_manifest(out_dir, "cluster", config, args.seed,
                        {"manifest": manifest_path},
                        ["manifest.json", "clusters.json"] + emb_names)
    print(f"{len(docs)} articles -> {len(clusters)} clusters")
    return 0


def _cmd_select_sets(args) -> int:
    from .curation import SyntheticTagProvider, build_eval_set
    from .dataio import load_manifest, save_manifest

    out_dir = _resolve_out(args, required=True)
    manifest_path = _data_manifest_path(args.data)
    manifest = load_manifest(manifest_path)
    curated = build_eval_set(
        manifest,
        k=args.k,
        min_images=args.min_images,
        count=args.count,
        budget=args.budget,
        seed=args.seed,
        tag_provider=SyntheticTagProvider(args.seed),
    )
    save_manifest(out_dir / "manifest.json", curated)
    emb_names = _copy_embeddings(manifest, manifest_path.parent, out_dir)
    config = {
        "budget": args.budget,
        "count": args.count,
        "data": str(args.data),
        "k": args.k,
        "min_images": args.min_images,
    }
    _write_run_manifest(out_dir, "select-sets", config, args.seed,
                        {"manifest": manifest_path},
                        ["manifest.json"] + emb_names)
    print(f"curated {len(curated.stories)} stories with {args.k}-image ground truth")
    return 0


def _cmd_train(args) -> int:
    from .dataio import load_corpus
    from .trainer import TrainConfig, save_checkpoint, train_loop

    out_dir = _resolve_out(args, required=True)
    manifest_path = _data_manifest_path(args.data)
    manifest, text, image = load_corpus(manifest_path)

    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = TrainConfig.from_json(json.load(fh))
    elif args.desk_scale:
        cfg = TrainConfig.desk_scale()
    else:
        cfg = TrainConfig()
    overrides = {
        "objective": args.objective,
        "base_lr": args.base_lr,
        "warmup_steps": args.warmup,
        "total_steps": args.steps,
        "batch_size": args.batch_size,
        "lam": args.lam,
        "temperature": args.temperature,
        "seed": args.seed,
        "joint_dim": args.joint_dim,
        "images_per_story_sample": args.images_per_story,
        "val_every": args.val_every,
    }
    from dataclasses import replace

    applied = {k: v for k, v in overrides.items() if v is not None}
    if applied.get("images_per_story_sample") not in (None, "all"):
        applied["images_per_story_sample"] = int(applied["images_per_story_sample"])
    cfg = replace(cfg, **applied)
    cfg.validate()

    state = train_loop(manifest, text, image, cfg)
    save_checkpoint(out_dir, state, cfg)
    inputs = {"manifest": manifest_path}
    if args.config:
        inputs["config"] = Path(args.config)
    outputs = ["checkpoint.json", "training_log.json", "params"]
    _write_run_manifest(out_dir, "train", cfg.to_json(), cfg.seed, inputs, outputs)
    last = state.log[-1] if state.log else {}
    print(f"trained {cfg.objective} for {state.step} steps, "
          f"final loss {last.get('loss', float('nan')):.6f}")
    return 0


def _cmd_eval(args) -> int:
    from .dataio import load_corpus
    from .retrieval_eval import evaluate
    from .trainer import load_checkpoint

    manifest_path = _data_manifest_path(args.data)
    manifest, text, image = load_corpus(manifest_path)
    state, _ = load_checkpoint(args.ckpt)
    report = evaluate(manifest, text, image, state.text_head, state.image_head,
                      protocol=args.protocol, scorer=args.scorer, seed=args.seed)
    sys.stdout.write(report.render())
    out_dir = _resolve_out(args, required=False)
    if out_dir is not None:
        (out_dir / "eval_report.json").write_text(report.to_json(), encoding="utf-8")
        config = {
            "ckpt": str(args.ckpt),
            "data": str(args.data),
            "protocol": args.protocol,
            "scorer": args.scorer,
        }
        _write_run_manifest(out_dir, "eval", config, args.seed,
                            {"manifest": manifest_path,
                             "checkpoint": Path(args.ckpt) / "checkpoint.json"},
                            ["eval_report.json"])
    return 0


def _cmd_illustrate(args) -> int:
    from .dataio import load_corpus
    from .illustrate import illustrate_article, load_article

    manifest_path = _data_manifest_path(args.pool)
    manifest, text, image = load_corpus(manifest_path)
    request = load_article(args.article, text_matrix=text)

    if args.ckpt:
        from .trainer import load_checkpoint

        state, _ = load_checkpoint(args.ckpt)
        text_head, image_head = state.text_head, state.image_head
    else:
        import numpy as np

        from .trainer import init_head

        rng = np.random.default_rng(args.seed)
        text_head = init_head(manifest.text_dim, manifest.text_dim, "text", rng)
        image_head = init_head(manifest.image_dim, manifest.image_dim, "image", rng)

    report = illustrate_article(
        request, image, text_head, image_head,
        x=args.x, scorer=args.scorer, budget=args.budget, seed=args.seed,
        m_per_entity=args.m_per_entity, attribution=args.attribution,
    )
    print(json.dumps(report, indent=1, sort_keys=True))
    out_dir = _resolve_out(args, required=False)
    if out_dir is not None:
        _dump_json(out_dir / "illustrate_report.json", report)
        config = {
            "article": str(args.article),
            "attribution": args.attribution,
            "budget": args.budget,
            "ckpt": args.ckpt,
            "m_per_entity": args.m_per_entity,
            "pool": str(args.pool),
            "scorer": args.scorer,
            "x": args.x,
        }
        inputs = {"article": Path(args.article), "manifest": manifest_path}
        _write_run_manifest(out_dir, "illustrate", config, args.seed, inputs,
                            ["illustrate_report.json"])
    return 0


def _cmd_gradcheck(args) -> int:
    from .trainer import gradient_check_report

    report = gradient_check_report(seed=args.seed, batches=args.batches)
    for name, err in sorted(report["losses"].items()):
        print(f"{name:<10} max relative error {err:.3e}")
    print(f"tolerance {report['tolerance']:.0e}: {'ok' if report['ok'] else 'FAILED'}")
    out_dir = _resolve_out(args, required=False)
    if out_dir is not None:
        _dump_json(out_dir / "gradcheck_report.json", report)
        _write_run_manifest(out_dir, "gradcheck",
                            {"batches": args.batches}, args.seed, {},
                            ["gradcheck_report.json"])
    return 0 if report["ok"] else 1


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storyalign",
        description="Align long articles with unordered image sets on top of "
                    "frozen embeddings.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--out", default=None,
                       help="output directory (or set STORYALIGN_OUT)")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS thread pools (or set STORYALIGN_THREADS)")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--stories", type=int, default=20)
    p.add_argument("--images-per-story", type=int, default=5)
    p.add_argument("--sentences-per-article", type=int, default=8)
    p.add_argument("--articles-per-story", type=int, default=2)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--aspect-spread", type=float, default=1.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ingest", help="load and validate a dataset directory")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("cluster", help="windowed agglomerative story clustering")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--window-days", type=int, default=7)
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--linkage", choices=sorted(_LINKAGE), default="avg")
    p.add_argument("--entity-threshold", type=float, default=None,
                   help="enable the entity-merge second pass")
    p.add_argument("--entity-dim", type=int, default=16)
    p.add_argument("--channels", default=None,
                   help="comma-separated channel allowlist")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("select-sets", help="attach diverse ground-truth image sets")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--budget", type=int, default=10_000)
    p.add_argument("--min-images", type=int, default=5)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=_cmd_select_sets)

    p = sub.add_parser("train", help="train projection heads")
    common(p, seed_default=None)      # None keeps the config file's seed
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="JSON train config file")
    p.add_argument("--desk-scale", action="store_true",
                   help="start from the desk-scale preset instead of the stock defaults")
    p.add_argument("--objective", choices=("infonce", "milnce", "pcme", "milsim"),
                   default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--base-lr", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--joint-dim", type=int, default=None)
    p.add_argument("--images-per-story", default=None,
                   help="'all' or a per-story image sample count")
    p.add_argument("--val-every", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="article-to-image-set retrieval metrics")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--protocol", choices=("fixed3", "fixed4", "fixed5", "mixed"),
                   default="fixed5")
    p.add_argument("--scorer", choices=("single", "mean"), default="mean")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("illustrate", help="pick the best image set for an article")
    common(p)
    p.add_argument("--article", required=True)
    p.add_argument("--pool", required=True, help="dataset directory used as the image pool")
    p.add_argument("--x", type=int, default=5)
    p.add_argument("--scorer", choices=("single", "mean"), default="mean")
    p.add_argument("--budget", type=int, default=10_000)
    p.add_argument("--m-per-entity", type=int, default=10)
    p.add_argument("--attribution", action="store_true")
    p.add_argument("--ckpt", default=None)
    p.set_defaults(func=_cmd_illustrate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    common(p)
    p.add_argument("--batches", type=int, default=3)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_thread_cap(args.threads)
    from .errors import StoryAlignError

    try:
        return args.func(args)
    except StoryAlignError as exc:
        report = {
            "command": args.command,
            "error": type(exc).__name__,
            "message": str(exc),
        }
        print(json.dumps(report, indent=1, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
