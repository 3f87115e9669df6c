"""Acceptance gate: ten end-to-end checks covering gradients, oracle
equivalence, exact reductions, closed-form fixtures, synthetic training,
objective ordering, combinatorial search, metrics, clustering recovery,
and pipeline determinism.

Each check prints exactly one `[criterion N] PASS|FAIL` line through
``capsys.disabled()`` so the verdicts land on the real stdout even under
pytest's default capture, then asserts.
"""

import math
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import oracles
from storyalign.autodiff import Tape
from storyalign.curation import (
    DocumentVector,
    EntityTagSet,
    agglomerative_cluster,
    select_diverse_set,
)
from storyalign.dataio import EmbeddingMatrix
from storyalign.illustrate import CandidatePool, best_image_set
from storyalign.objectives import (
    SimilarityConfig,
    batch_from_arrays,
    infonce_loss,
    milnce_loss,
    milsim_loss,
    pcme_loss,
    pcme_match_prob,
    soft_contrastive_loss,
)
from storyalign.retrieval_eval import evaluate, median_rank, recall_at_k
from storyalign.synth import SyntheticGenConfig, generate_synthetic_corpus
from storyalign.trainer import (
    TrainConfig,
    gradient_check_report,
    init_head,
    train_loop,
)


@pytest.fixture
def verdict(capsys):
    """One pass/fail line per criterion, printed past the capture layer."""

    def emit(n: int, ok: bool, detail: str = "") -> None:
        line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}"
        if detail:
            line += f"  {detail}"
        with capsys.disabled():
            print(line, flush=True)
        assert ok, line

    return emit


def _loss_value(loss_fn, sent_mats, img_mats, **kw) -> float:
    tape = Tape()
    batch = batch_from_arrays(tape, sent_mats, img_mats)
    return float(loss_fn(batch, **kw).value)


# ---------------------------------------------------------------------------
# criterion 1: analytic gradients vs central finite differences

def test_criterion_1_gradient_finite_difference_agreement(verdict):
    t0 = time.perf_counter()
    report = gradient_check_report(seed=7, batches=20, h=1e-4, tolerance=1e-4)
    elapsed = time.perf_counter() - t0
    ok = report["ok"] and elapsed < 30.0
    verdict(1, ok,
             f"max_rel_err={report['max_relative_error']:.2e} "
             f"batches=20x{len(report['losses'])} {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: loss values vs naive-loop oracles

def test_criterion_2_losses_match_naive_oracles(verdict):
    rng = np.random.default_rng(22)
    worst = 0.0
    for _ in range(20):
        sent, imgs = oracles.random_batch_mats(rng)
        cos = SimilarityConfig(0.07, True)
        worst = max(worst, abs(
            _loss_value(infonce_loss, sent, imgs, cfg=cos)
            - oracles.naive_infonce(sent, imgs, tau=0.07, normalize=True)))
        worst = max(worst, abs(
            _loss_value(milnce_loss, sent, imgs, cfg=cos)
            - oracles.naive_milnce(sent, imgs, tau=0.07, normalize=True)))
        lam = float(rng.uniform(0.0, 1.0))
        worst = max(worst, abs(
            _loss_value(milsim_loss, sent, imgs, lam=lam,
                        cfg=SimilarityConfig(0.2, True))
            - oracles.naive_milsim(sent, imgs, lam=lam, tau=0.2, normalize=True)))
    for _ in range(10):
        b = int(rng.integers(2, 4))
        n_img = int(rng.integers(b, b + 3))
        d = int(rng.integers(2, 5))
        k = int(rng.integers(1, 3))
        image_story = np.sort(rng.integers(0, b, size=n_img))
        image_story[:b] = np.arange(b)
        image_story = np.sort(image_story)
        img_means = rng.standard_normal((n_img, d))
        txt_means = rng.standard_normal((b, d))
        img_lv = rng.standard_normal((n_img, d)) * 0.3 - 1.0
        txt_lv = rng.standard_normal((b, d)) * 0.3 - 1.0
        alpha, beta = 1.0 + float(rng.uniform(0, 1)), float(rng.uniform(-1, 1))
        eps_i = rng.standard_normal((k, n_img, d))
        eps_t = rng.standard_normal((k, b, d))
        tape = Tape()
        got = float(pcme_loss(
            tape, tape.constant(img_means), tape.constant(txt_means),
            tape.constant(img_lv), tape.constant(txt_lv),
            image_story, alpha, beta, eps_i, eps_t,
        ).value)
        want = oracles.naive_pcme(img_means, txt_means, img_lv, txt_lv,
                                  image_story, alpha, beta, eps_i, eps_t)
        worst = max(worst, abs(got - want))
    verdict(2, worst < 1e-10, f"worst_abs_diff={worst:.2e}")


# ---------------------------------------------------------------------------
# criterion 3: exact objective reductions

def test_criterion_3_reductions_are_bitwise(verdict):
    rng = np.random.default_rng(33)
    cos = SimilarityConfig(0.07, True)
    raw = SimilarityConfig(0.07, False)
    milnce_exact = milsim_exact = 0
    trials = 50
    for _ in range(trials):
        b = int(rng.integers(2, 5))
        d = int(rng.integers(3, 8))
        sent = [rng.standard_normal((int(rng.integers(1, 4)), d)) for _ in range(b)]
        single = [rng.standard_normal((1, d)) for _ in range(b)]
        milnce_exact += (_loss_value(milnce_loss, sent, single, cfg=cos)
                         == _loss_value(infonce_loss, sent, single, cfg=cos))
        sent2, imgs2 = oracles.random_batch_mats(rng)
        milsim_exact += (_loss_value(milsim_loss, sent2, imgs2, lam=0.0, cfg=cos)
                         == _loss_value(infonce_loss, sent2, imgs2, cfg=raw))
    ok = milnce_exact == trials and milsim_exact == trials
    verdict(3, ok, f"milnce {milnce_exact}/{trials}, milsim {milsim_exact}/{trials}")


# ---------------------------------------------------------------------------
# criterion 4: closed-form fixtures

def test_criterion_4_closed_form_fixtures(verdict):
    e = np.eye(2)
    got_nce = _loss_value(infonce_loss, [e[0:1], e[1:2]], [e[0:1], e[1:2]],
                          cfg=SimilarityConfig(1.0, True))
    err_nce = abs(got_nce - math.log(1.0 + 2.0 / math.e))

    tape = Tape()
    p = pcme_match_prob(tape, [tape.constant(np.array([0.0, 0.0]))],
                        [tape.constant(np.array([2.0, 0.0]))], 1.0, 0.0)
    err_sig = abs(float(p.value) - 1.0 / (1.0 + math.exp(2.0)))

    half = soft_contrastive_loss(tape, [tape.constant(np.asarray(0.5))], [True])
    err_soft = abs(float(half.value) - math.log(2.0))

    ok = err_nce <= 1e-6 and err_sig <= 1e-6 and err_soft <= 1e-6
    verdict(4, ok, f"infonce={err_nce:.1e} sigmoid={err_sig:.1e} soft={err_soft:.1e}")


# ---------------------------------------------------------------------------
# criteria 5 and 6 share a synthetic benchmark: 100 train / 50 held-out
# stories, 5 images and 2x8 sentences each, base dim 32, noise 0.1

@pytest.fixture(scope="module")
def bench():
    cfg = SyntheticGenConfig(num_stories=150, images_per_story=5,
                             sentences_per_article=8, articles_per_story=2,
                             latent_dim=16, text_dim=32, image_dim=32,
                             noise_scale=0.1, seed=11)
    corpus = generate_synthetic_corpus(cfg)
    stories = corpus.manifest.stories
    return {
        "corpus": corpus,
        "train": replace(corpus.manifest, stories=list(stories[:100])),
        "eval": replace(corpus.manifest, stories=list(stories[100:])),
        "arms": {},
    }


def _train_arm(bench, objective, images, seed):
    key = (objective, images, seed)
    if key not in bench["arms"]:
        cfg = TrainConfig.desk_scale(objective=objective,
                                     images_per_story_sample=images, seed=seed)
        corpus = bench["corpus"]
        t0 = time.perf_counter()
        state = train_loop(bench["train"], corpus.text, corpus.image, cfg)
        bench["arms"][key] = (state, time.perf_counter() - t0)
    return bench["arms"][key]


def _held_out_metrics(bench, text_head, image_head, scorer):
    corpus = bench["corpus"]
    report = evaluate(bench["eval"], corpus.text, corpus.image,
                      text_head, image_head, protocol="fixed5", scorer=scorer)
    return report.metrics


def test_criterion_5_synthetic_training_reaches_high_recall(bench, verdict):
    state, train_seconds = _train_arm(bench, "milsim", "all", 0)
    t0 = time.perf_counter()
    metrics = _held_out_metrics(bench, state.text_head, state.image_head, "mean")
    elapsed = train_seconds + (time.perf_counter() - t0)
    r1, med = metrics["recall_at_1"], metrics["median_rank"]

    untrained = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        th = init_head(32, 32, "text", rng, scheme="xavier")
        ih = init_head(32, 32, "image", rng, scheme="xavier")
        untrained.append(_held_out_metrics(bench, th, ih, "mean")["recall_at_1"])
    mean_untrained = float(np.mean(untrained))
    chance = 1.0 / len(bench["eval"].stories)

    ok = (r1 >= 0.80 and med == 1
          and abs(mean_untrained - chance) <= 0.03
          and elapsed < 60.0)
    verdict(5, ok,
             f"R@1={r1:.3f} median={med} untrained={mean_untrained:.3f} "
             f"(chance {chance:.3f}) {elapsed:.1f}s")


def test_criterion_6_set_level_beats_single_image_baseline(bench, verdict):
    wins_mean = wins_milsim = 0
    per_seed = []
    for seed in range(5):
        single, _ = _train_arm(bench, "infonce", 1, seed)
        mean_agg, _ = _train_arm(bench, "infonce", "all", seed)
        milsim, _ = _train_arm(bench, "milsim", "all", seed)
        r_single = _held_out_metrics(bench, single.text_head,
                                     single.image_head, "single")["recall_at_1"]
        r_mean = _held_out_metrics(bench, mean_agg.text_head,
                                   mean_agg.image_head, "mean")["recall_at_1"]
        r_milsim = _held_out_metrics(bench, milsim.text_head,
                                     milsim.image_head, "mean")["recall_at_1"]
        wins_mean += r_mean >= r_single
        wins_milsim += r_milsim >= r_single
        per_seed.append(f"{r_single:.2f}/{r_mean:.2f}/{r_milsim:.2f}")
    ok = wins_mean >= 4 and wins_milsim >= 4
    verdict(6, ok,
             f"mean {wins_mean}/5, milsim {wins_milsim}/5 "
             f"(single/mean/milsim per seed: {', '.join(per_seed)})")


# ---------------------------------------------------------------------------
# criterion 7: combinatorial selection vs brute force

def test_criterion_7_combinatorial_searches_match_brute_force(verdict):
    rng = np.random.default_rng(77)
    vocab = [f"t{i}" for i in range(10)]
    select_ok = 0
    for _ in range(100):
        n = int(rng.integers(5, 13))
        k = int(rng.integers(2, 6))
        mapping = {
            f"im{i:02d}": {vocab[int(t)]
                           for t in rng.integers(0, 10, size=int(rng.integers(1, 5)))}
            for i in range(n)
        }
        tagsets = [EntityTagSet(owner=o, tags=set(ts)) for o, ts in mapping.items()]
        select_ok += (select_diverse_set(tagsets, k=k)
                      == oracles.brute_select_diverse(mapping, k))

    best_ok = 0
    for _ in range(100):
        n = int(rng.integers(5, 13))
        x = int(rng.integers(1, 6))
        scorer = ("single", "mean")[int(rng.integers(2))]
        ids = [f"p{i:02d}" for i in range(n)]
        data = rng.standard_normal((n, 6))
        article = rng.standard_normal(6)
        got_ids, got_score = best_image_set(
            article, CandidatePool(per_entity={"e": list(ids)}),
            EmbeddingMatrix(ids=ids, data=data), x=x, scorer=scorer)
        want_ids, want_score = oracles.brute_best_set(
            article, dict(zip(ids, data)), x, scorer, True)
        best_ok += got_ids == want_ids and abs(got_score - want_score) < 1e-12
    ok = select_ok == 100 and best_ok == 100
    verdict(7, ok, f"select {select_ok}/100, best-set {best_ok}/100")


# ---------------------------------------------------------------------------
# criterion 8: retrieval metric fixtures and monotonicity

def test_criterion_8_metric_fixtures_and_monotonicity(verdict):
    fixture_ok = (
        recall_at_k([1, 3, 7], 1) == 1 / 3
        and recall_at_k([1, 3, 7], 5) == 2 / 3
        and recall_at_k([1, 3, 7], 10) == 1.0
        and median_rank([1, 3, 7]) == 3
    )
    rng = np.random.default_rng(88)
    ranks = rng.integers(1, 50, size=(1000, 11))
    grid = np.array([1, 2, 3, 5, 8, 13, 21, 34, 50])
    recalls = (ranks[:, None, :] <= grid[None, :, None]).mean(axis=2)
    monotone_ok = bool(np.all(np.diff(recalls, axis=1) >= 0.0))
    ok = fixture_ok and monotone_ok
    verdict(8, ok, f"fixtures={'ok' if fixture_ok else 'BAD'} "
                    f"monotone on {ranks.shape[0]} rank vectors="
                    f"{'ok' if monotone_ok else 'BAD'}")


# ---------------------------------------------------------------------------
# criterion 9: clustering recovery and threshold monotonicity

def _planted_corpus(rng, dim=12):
    """Two direction bundles with a verified margin: every intra-group
    cosine > 0.9, every inter-group cosine < 0.2, n <= 60."""
    while True:
        n_a = int(rng.integers(5, 31))
        n_b = int(rng.integers(5, 31))
        u0 = rng.standard_normal(dim)
        u0 /= np.linalg.norm(u0)
        u1 = rng.standard_normal(dim)
        u1 -= u0 * (u0 @ u1)
        u1 /= np.linalg.norm(u1)
        vecs = []
        for i in range(n_a + n_b):
            v = (u0 if i < n_a else u1) + 0.05 * rng.standard_normal(dim)
            vecs.append(v / np.linalg.norm(v))
        vecs = np.array(vecs)
        labels = np.array([0] * n_a + [1] * n_b)
        cos = vecs @ vecs.T
        same = (labels[:, None] == labels[None, :]) & ~np.eye(len(labels), dtype=bool)
        cross = labels[:, None] != labels[None, :]
        if cos[same].min() > 0.9 and cos[cross].max() < 0.2:
            return vecs, labels


def _docs(vectors):
    return [DocumentVector(article_id=f"a{i:03d}", publication_time=0,
                           vector=v, channel="wire") for i, v in enumerate(vectors)]


def test_criterion_9_planted_clusters_recovered_exactly(verdict):
    recovered = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        vecs, labels = _planted_corpus(rng)
        clusters = agglomerative_cluster(_docs(vecs), window_days=7,
                                         distance_threshold=0.45)
        got = np.empty(len(labels), dtype=np.int64)
        for ci, c in enumerate(clusters):
            for m in c.members:
                got[int(m[1:])] = ci
        recovered += oracles.adjusted_rand_index(labels.tolist(), got.tolist()) == 1.0

    monotone = 0
    rng = np.random.default_rng(91)
    for _ in range(20):
        n = int(rng.integers(6, 25))
        docs = _docs(rng.standard_normal((n, 6)))
        counts = [len(agglomerative_cluster(docs, window_days=7,
                                            distance_threshold=float(t)))
                  for t in np.linspace(0.0, 2.0, 8)]
        monotone += counts == sorted(counts, reverse=True)
    ok = recovered == 10 and monotone == 20
    verdict(9, ok, f"recovered {recovered}/10, threshold-monotone {monotone}/20")


# ---------------------------------------------------------------------------
# criterion 10: pipeline determinism

def _run_pipeline(root: Path) -> dict[str, bytes]:
    stages = [
        ["synth", "--out", str(root / "synth"), "--seed", "5", "--stories", "12",
         "--images-per-story", "5", "--sentences-per-article", "4",
         "--articles-per-story", "2", "--dim", "16", "--latent-dim", "8"],
        ["cluster", "--data", str(root / "synth"), "--out", str(root / "clustered"),
         "--window-days", "3650", "--threshold", "0.2", "--seed", "5"],
        ["select-sets", "--data", str(root / "clustered"),
         "--out", str(root / "curated"), "--k", "3", "--min-images", "3",
         "--seed", "5"],
        ["train", "--data", str(root / "synth"), "--out", str(root / "ckpt"),
         "--objective", "milsim", "--steps", "40", "--warmup", "8",
         "--batch-size", "6", "--base-lr", "0.02", "--seed", "5"],
        ["eval", "--data", str(root / "curated"), "--ckpt", str(root / "ckpt"),
         "--out", str(root / "evald"), "--protocol", "fixed3", "--seed", "5"],
    ]
    for argv in stages:
        proc = subprocess.run([sys.executable, "-m", "storyalign.cli", *argv],
                              capture_output=True, text=True)
        assert proc.returncode == 0, f"{argv[0]} failed:\n{proc.stderr}"
    files = {}
    for rel in ("evald/eval_report.json", "curated/manifest.json",
                "clustered/clusters.json", "ckpt/checkpoint.json",
                "ckpt/training_log.json"):
        files[rel] = (root / rel).read_bytes()
    for p in sorted((root / "ckpt" / "params").glob("*.emb")):
        files[f"ckpt/params/{p.name}"] = p.read_bytes()
    return files


def test_criterion_10_pipeline_is_byte_deterministic(tmp_path, verdict):
    first = _run_pipeline(tmp_path / "run1")
    second = _run_pipeline(tmp_path / "run2")
    same_names = set(first) == set(second)
    differing = [name for name in first if first.get(name) != second.get(name)]
    ok = same_names and not differing
    verdict(10, ok,
             f"{len(first)} artifacts byte-compared"
             + (f", differing: {differing}" if differing else ""))
