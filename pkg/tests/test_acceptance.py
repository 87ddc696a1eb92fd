"""Acceptance criteria, one test each.

Every test emits a single ``[ACCEPT] Cn PASS|FAIL ...`` line. The lines are
printed inline under ``-s`` and collected into the terminal summary otherwise.
"""

from __future__ import annotations

import math
import random
import sys
import time

import numpy as np
import pytest

from etr.bqe import bqe_score
from etr.losses import LossConfig, LossKind, ScoreBundle, batch_loss_and_grad, finite_diff_check, loss_gradient, loss_value
from etr.model import ModelConfig, ScoreVariant, init_model, mono_score_pair
from etr.pipeline import DATASET_STATS, bench_latency, synthetic_workload, token_cost, train_toy
from etr.retrieval import Document, Field, bm25_search, build_bm25_index, tokenize
from etr.toydata import make_corpus

SIGMOID_KINDS = (LossKind.SIGMOID_CONTRASTIVE, LossKind.SEP_SIGMOID, LossKind.COMBINED_SIGMOID)


ACCEPT_LINES: list[str] = []


def report(name: str, ok: bool, detail: str) -> None:
    line = f"[ACCEPT] {name} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPT_LINES.append(line)
    print(line)


@pytest.fixture(scope="module")
def model():
    return init_model(ModelConfig(), seed=11)


def test_c1_oracle_equivalence(model):
    rng = np.random.default_rng(101)
    vocab = model.config.vocab_size
    start = time.perf_counter()
    worst, n_scores = 0.0, 0
    for _ in range(120):
        query = rng.integers(4, vocab, rng.integers(2, 41)).tolist()
        titles = [(i, rng.integers(4, vocab, rng.integers(1, 9)).tolist()) for i in range(rng.integers(1, 33))]
        for (_, t), s in zip(titles, bqe_score(model, query, titles)):
            worst = max(worst, abs(s - mono_score_pair(query, t, ScoreVariant.QUERY_BLIND, model)))
            n_scores += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 60
    report("C1", ok, f"120 configs, {n_scores} scores, max |diff| {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-9
    assert elapsed < 60


def test_c2_isolation(model):
    rng = np.random.default_rng(202)
    vocab = model.config.vocab_size
    worst = 0.0
    for _ in range(50):
        query = rng.integers(4, vocab, rng.integers(2, 41)).tolist()
        titles = [(i, rng.integers(4, vocab, rng.integers(1, 9)).tolist()) for i in range(32)]
        before = bqe_score(model, query, titles)
        after = bqe_score(model, query, titles + [(32, rng.integers(4, vocab, rng.integers(1, 9)).tolist())])
        worst = max(worst, max(abs(a - b) for a, b in zip(before, after)))
    report("C2", worst <= 1e-9, f"50 cases, max change {worst:.2e}")
    assert worst <= 1e-9


def test_c3_token_economics():
    fever = DATASET_STATS["fever"]
    passage = {k: token_cost(fever, k).speedup_ratio_tokens for k in range(26, 61)}
    ok_a = all(20 <= r <= 40 for r in passage.values())
    failures = [
        (name, k, token_cost(stats, k).title_ratio_tokens)
        for name, stats in DATASET_STATS.items()
        for k in range(4, 201)
        if token_cost(stats, k).title_ratio_tokens < 3
    ]
    ok_b = not failures
    report("C3a", ok_a, f"FEVER passage/bqe over k=26..60 in [{min(passage.values()):.3f}, {max(passage.values()):.3f}]")
    detail = "title/bqe >= 3 for k>=4 on all datasets"
    if failures:
        by_ds = {}
        for name, k, r in failures:
            by_ds.setdefault(name, []).append((k, r))
        detail = "; ".join(f"{n}: below 3 at k={v[0][0]}..{v[-1][0]} (k=4 gives {v[0][1]:.3f})" for n, v in by_ds.items())
    report("C3b", ok_b, detail)
    assert ok_a
    assert ok_b, detail


def test_c4_measured_speedup(model):
    work = synthetic_workload(5, 14, 4, 110, 40, model.config.vocab_size, seed=4)
    start = time.perf_counter()
    bqe = bench_latency(model, work, "BQE", repetitions=5).median_seconds_per_query
    passage = bench_latency(model, work, "VANILLA_PASSAGE", repetitions=5).median_seconds_per_query
    elapsed = time.perf_counter() - start
    ratio = passage / bqe
    ok = bqe <= passage / 5 and elapsed < 300
    report("C4", ok, f"BQE {bqe * 1e3:.2f} ms vs passage {passage * 1e3:.2f} ms per query, {ratio:.1f}x, {elapsed:.1f}s")
    assert bqe <= passage / 5
    assert elapsed < 300


def test_c5_gradient_correctness():
    rng = np.random.default_rng(505)
    worst = {k: 0.0 for k in LossKind}
    for _ in range(1000):
        scores = rng.uniform(0.01, 0.99, rng.integers(2, 10))
        bundle = ScoreBundle(scores[0], scores[1:])
        for kind in LossKind:
            worst[kind] = max(worst[kind], finite_diff_check(kind, bundle, h=1e-6))
    ok = max(worst.values()) < 1e-4
    report("C5", ok, "1000 bundles, max rel err " + ", ".join(f"{k.value}={v:.1e}" for k, v in worst.items()))
    assert ok


def test_c6_attenuation():
    cfg = LossConfig(epsilon=5.0, lambda_gt=0.5)

    def mag(y):
        return abs(loss_gradient(LossKind.SEP_SIGMOID, ScoreBundle(y, [0.5]), cfg)[0])

    centre = mag(0.5)
    edges = (mag(0.01), mag(0.99))
    grid = np.round(np.arange(0.001, 1.0, 0.001), 3)
    peak = float(grid[np.argmax([mag(y) for y in grid])])
    ok = all(e < 0.8 * centre for e in edges) and abs(peak - 0.5) <= 1e-3
    report("C6", ok, f"|g|(0.5)={centre:.4f}, |g|(0.01)={edges[0]:.4f}, |g|(0.99)={edges[1]:.4f}, argmax {peak}")
    assert ok


def test_c7_nan_contrast():
    log_bad = [
        loss_value(LossKind.LOG_CONTRASTIVE, ScoreBundle(0.7, [0.2, 1.0])),
        loss_value(LossKind.LOG_CONTRASTIVE, ScoreBundle(0.0, [0.2, 0.3])),
    ]
    log_nonfinite = not any(math.isfinite(x) for x in log_bad)

    rng = np.random.default_rng(707)
    n, k = 100_000, 4
    edge = np.array([1e-12, 1e-9, 1e-6, 1 - 1e-6, 1 - 1e-9, 1 - 1e-12])
    pos = rng.uniform(0, 1, n)
    negs = rng.uniform(0, 1, (n, k))
    # half the bundles take boundary-adjacent values
    pos[: n // 2] = rng.choice(edge, n // 2)
    mask = rng.random((n // 2, k)) < 0.5
    negs[: n // 2][mask] = rng.choice(edge, mask.sum())
    pos = np.clip(pos, 1e-12, 1 - 1e-12)
    negs = np.clip(negs, 1e-12, 1 - 1e-12)
    all_finite = True
    for kind in SIGMOID_KINDS:
        losses, grads = batch_loss_and_grad(kind, pos, negs)
        all_finite &= bool(np.all(np.isfinite(losses)) and np.all(np.isfinite(grads)))
    ok = log_nonfinite and all_finite
    report("C7", ok, f"log loss at boundary {log_bad}; sigmoid losses finite over {n} bundles: {all_finite}")
    assert ok


def test_c8_training_stability():
    lines, ok = [], True
    for seed in (0, 1, 2):
        sig = train_toy(LossKind.COMBINED_SIGMOID, seed=seed)
        log = train_toy(LossKind.LOG_CONTRASTIVE, seed=seed)
        spike = log.max_finite_grad_norm >= 10 * sig.max_finite_grad_norm
        seed_ok = sig.n_nonfinite == 0 and (log.n_nonfinite > 0 or spike)
        ok &= seed_ok
        lines.append(
            f"seed {seed}: sigmoid nonfinite={sig.n_nonfinite} acc={sig.eval_accuracy[-1]:.3f} "
            f"maxgrad={sig.max_finite_grad_norm:.3g} | log nonfinite={log.n_nonfinite} "
            f"maxgrad={log.max_finite_grad_norm:.3g} acc={log.eval_accuracy[-1]:.3f}"
        )
    report("C8", ok, "; ".join(lines))
    assert ok


def _brute(corpus, query):
    docs = [tokenize(d.title) + tokenize(d.text) for d in corpus]
    avg = sum(map(len, docs)) / len(docs)
    out = []
    for d, toks in zip(corpus, docs):
        score, hit = 0.0, False
        for term in dict.fromkeys(tokenize(query)):
            tf = toks.count(term)
            if tf:
                hit = True
                df = sum(term in t for t in docs)
                idf = math.log(1 + (len(docs) - df + 0.5) / (df + 0.5))
                score += idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * len(toks) / avg))
        if hit:
            out.append((d.doc_id, score))
    return sorted(out, key=lambda p: (-p[1], p[0]))


def test_c9_bm25_correctness():
    corpus = make_corpus(50, seed=9)
    index = build_bm25_index(corpus, Field.TITLE_PLUS_TEXT)
    vocab = sorted({t for d in corpus for t in tokenize(d.title + " " + d.text)})
    rng = random.Random(9)
    mismatches = 0
    for _ in range(200):
        q = " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 6)))
        got = [(c.doc_id, c.first_stage_score) for c in bm25_search(index, q, 50)]
        mismatches += got != _brute(corpus, q)
    (single,) = bm25_search(build_bm25_index([Document("x", "hill")], Field.TITLE), "hill", 1)
    ok = mismatches == 0 and abs(single.first_stage_score - 0.2876821) <= 1e-6
    report("C9", ok, f"200 queries, {mismatches} mismatches; single-doc score {single.first_stage_score:.7f}")
    assert ok


def test_c10_pipeline_determinism(tmp_path):
    from etr.cli import main
    from etr.toydata import write_toy_files

    corpus, queries = write_toy_files(tmp_path, 50, 12, seed=10)
    d = tmp_path
    base = ["--corpus", str(corpus), "--queries", str(queries), "--seed", "10"]
    steps = [
        ["init-model", "--model", str(d / "m.npz")],
        ["index", "--index", str(d / "i.idx")],
        ["retrieve", "--index", str(d / "i.idx"), "--candidates", str(d / "c.jsonl"), "--train-pool", str(d / "p.jsonl")],
        ["rerank", "--candidates", str(d / "c.jsonl"), "--model", str(d / "m.npz"), "--run", str(d / "r.run")],
        ["eval", "--run", str(d / "r.run"), "--output", str(d / "e.json")],
    ]
    outputs = ["m.npz", "i.idx", "c.jsonl", "c.jsonl.meta.json", "p.jsonl", "r.run", "r.run.meta.json", "e.json"]
    snapshots = []
    for _ in range(2):
        for argv in steps:
            assert main([argv[0], *base, *argv[1:]]) == 0
        snapshots.append({name: (d / name).read_bytes() for name in outputs})
    differing = [n for n in outputs if snapshots[0][n] != snapshots[1][n]]
    report("C10", not differing, f"{len(outputs)} artifacts compared, differing: {differing or 'none'}")
    assert not differing


def test_c11_documented_only():
    report("C11", True, "not reproducible at desk scale; replaced by C1-C10 (no assertion)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
