"""Reranking pipeline, recall, token/memory cost models, latency bench, toy trainer."""

from __future__ import annotations

import enum
import os
import platform
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from etr.bqe import CrossScope, bqe_score
from etr.losses import LossConfig, LossKind, batch_loss_and_grad, sigmoid
from etr.model import ModelParams, ScoreVariant, mono_score_pair, text_to_ids
from etr.retrieval import Candidate, Document, tokenize


class RerankVariant(str, enum.Enum):
    BQE = "BQE"
    VANILLA_TITLE = "VANILLA_TITLE"
    VANILLA_PASSAGE = "VANILLA_PASSAGE"


@dataclass
class RankedList:
    qid: str
    entries: list[tuple[str, float]]
    provenance: str

    def __post_init__(self):
        ids = [d for d, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate doc ids in ranked list for {self.qid}")
        scores = [s for _, s in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"scores not sorted for {self.qid}")

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]


# --- reranking -------------------------------------------------------------------


def _ids(text: str, params: ModelParams, fallback: bool) -> list[int]:
    ids = text_to_ids(tokenize(text), params.config)
    if not ids and fallback:
        ids = [params.config.pad_id]
    return ids


def rerank(
    params: ModelParams,
    query_text: str,
    candidates: Sequence[Candidate],
    n_docs: int,
    corpus: Mapping[str, Document],
    variant: RerankVariant | str = RerankVariant.BQE,
    qid: str = "",
    mono_variant: ScoreVariant | str = ScoreVariant.QUERY_BLIND,
    cross_scope: CrossScope | str = CrossScope.QUERY_AND_TITLE,
) -> RankedList:
    """Score the first ``n_docs`` candidates and sort them by score.

    Ties keep first-stage order. BQE scores all titles in one packed pass;
    the vanilla variants run one forward pass per candidate, on the title or
    on title plus body text.
    """
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    variant = RerankVariant(variant)
    pool = list(candidates[:n_docs])
    if not pool:
        raise ValueError(f"no candidates for query {qid!r}")
    missing = [c.doc_id for c in pool if c.doc_id not in corpus]
    if missing:
        raise KeyError(f"candidate doc_id not in corpus: {missing[0]}")
    query = _ids(query_text, params, fallback=False)
    if not query:
        raise ValueError(f"query {qid!r} has no indexable tokens")

    if variant is RerankVariant.BQE:
        titles = [(c.doc_id, _ids(corpus[c.doc_id].title, params, True)) for c in pool]
        scores = bqe_score(params, query, titles, cross_scope)
    elif variant is RerankVariant.VANILLA_TITLE:
        scores = [mono_score_pair(query, _ids(corpus[c.doc_id].title, params, True), mono_variant, params) for c in pool]
    else:
        scores = []
        for c in pool:
            doc = corpus[c.doc_id]
            scores.append(mono_score_pair(query, _ids(doc.title + " " + doc.text, params, True), mono_variant, params))

    order = sorted(range(len(pool)), key=lambda i: -scores[i])
    return RankedList(qid, [(pool[i].doc_id, float(scores[i])) for i in order], variant.value)


# --- metrics ---------------------------------------------------------------------


def recall_at_k(ranked: RankedList | Sequence[str], gold_ids, k: int) -> float:
    """1.0 if any of the top-k ids is gold, else 0.0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gold = set(gold_ids)
    if not gold:
        raise ValueError("empty gold set")
    ids = ranked.doc_ids if isinstance(ranked, RankedList) else list(ranked)
    return 1.0 if any(d in gold for d in ids[:k]) else 0.0


def mean_recall_at_k(runs: Mapping[str, RankedList | Sequence[str]], gold: Mapping[str, Sequence[str]], k: int) -> float:
    """Mean hit rate over every query in ``gold``; queries missing from ``runs`` count as misses."""
    if not gold:
        raise ValueError("no queries to evaluate")
    return float(np.mean([recall_at_k(runs.get(qid, []), g, k) for qid, g in gold.items()]))


# --- cost models -----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetStats:
    avg_query_tokens: float
    avg_title_tokens: float = 4.0
    avg_passage_tokens: float = 110.0

    def __post_init__(self):
        if min(self.avg_query_tokens, self.avg_title_tokens, self.avg_passage_tokens) <= 0:
            raise ValueError("token statistics must be positive")


# average query lengths in T5 tokens; 4.0-token Wikipedia titles
DATASET_STATS = {
    "fever": DatasetStats(13.88),
    "triviaqa": DatasetStats(21.25),
    "wow": DatasetStats(93.63),
    "aidayago2": DatasetStats(624.47),
}


@dataclass
class CostReport:
    k: int
    vanilla_passage_tokens: float
    vanilla_title_tokens: float
    bqe_tokens: float
    speedup_ratio_tokens: float
    title_ratio_tokens: float
    memory_units: dict[str, float] = field(default_factory=dict)
    measured_latency: dict[str, float] | None = None


def token_cost(stats: DatasetStats, k: int) -> CostReport:
    """Encoded-token counts for k candidates under each reranking mode."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q, t, p = stats.avg_query_tokens, stats.avg_title_tokens, stats.avg_passage_tokens
    passage = k * (q + p)
    title = k * (q + t)
    bqe = q + k * t
    return CostReport(k, passage, title, bqe, passage / bqe, title / bqe)


def memory_model(n: float, d_attn: float, d_ff: float) -> tuple[float, float, float]:
    """``(n^2 * d_attn, n * d_ff * d_attn, total)`` for one encoder pass over n tokens."""
    if min(n, d_attn, d_ff) <= 0:
        raise ValueError("inputs must be positive")
    attn = n * n * d_attn
    ff = n * d_ff * d_attn
    return attn, ff, attn + ff


def cost_report(stats: DatasetStats, k: int, d_attn: float = 64, d_ff: float = 256) -> CostReport:
    """Token counts plus memory units summed over the passes each mode needs."""
    report = token_cost(stats, k)
    q, t, p = stats.avg_query_tokens, stats.avg_title_tokens, stats.avg_passage_tokens
    report.memory_units = {
        RerankVariant.VANILLA_PASSAGE.value: k * memory_model(q + p, d_attn, d_ff)[2],
        RerankVariant.VANILLA_TITLE.value: k * memory_model(q + t, d_attn, d_ff)[2],
        RerankVariant.BQE.value: memory_model(q + k * t, d_attn, d_ff)[2],
    }
    return report


# --- latency ---------------------------------------------------------------------


@dataclass
class BenchCandidate:
    doc_id: Hashable
    title: list[int]
    passage: list[int]


@dataclass
class LatencyReport:
    variant: str
    median_seconds_per_query: float
    rep_seconds_per_query: list[float]
    n_queries: int
    environment: dict


def synthetic_workload(
    n_queries: int, query_len: int, title_len: int, passage_len: int, k: int, vocab_size: int, seed: int = 0
) -> list[tuple[list[int], list[BenchCandidate]]]:
    """Random token ids shaped like a dataset's average lengths."""
    rng = np.random.default_rng(seed)
    lo = 4
    work = []
    for _ in range(n_queries):
        query = rng.integers(lo, vocab_size, query_len).tolist()
        cands = [
            BenchCandidate(i, rng.integers(lo, vocab_size, title_len).tolist(), rng.integers(lo, vocab_size, passage_len).tolist())
            for i in range(k)
        ]
        work.append((query, cands))
    return work


def _score_workload_item(params, query, cands, variant: RerankVariant) -> None:
    if variant is RerankVariant.BQE:
        bqe_score(params, query, [(c.doc_id, c.title) for c in cands])
    elif variant is RerankVariant.VANILLA_TITLE:
        for c in cands:
            mono_score_pair(query, c.title, ScoreVariant.QUERY_BLIND, params)
    else:
        for c in cands:
            mono_score_pair(query, c.passage, ScoreVariant.QUERY_BLIND, params)


def environment_info() -> dict:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "cpu_count": os.cpu_count(),
    }


def bench_latency(
    params: ModelParams,
    workload: Sequence[tuple[list[int], list[BenchCandidate]]],
    variant: RerankVariant | str,
    repetitions: int = 5,
    warmup: int = 1,
) -> LatencyReport:
    """Median wall-clock seconds per query over ``repetitions`` full sweeps."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    variant = RerankVariant(variant)
    for query, cands in workload[: max(warmup, 1)]:
        _score_workload_item(params, query, cands, variant)
    per_query = []
    for _ in range(repetitions):
        start = time.perf_counter()
        for query, cands in workload:
            _score_workload_item(params, query, cands, variant)
        per_query.append((time.perf_counter() - start) / len(workload))
    return LatencyReport(variant.value, statistics.median(per_query), per_query, len(workload), environment_info())


# --- toy training ------------------------------------------------------------------

ITEM_CLEAN, ITEM_TRIVIAL, ITEM_NOISY = "clean", "trivial", "noisy"


@dataclass
class ToyDataset:
    """Bag-of-token queries with one gold title and ``n_neg`` negatives each.

    ``titles[i, 0]`` is the gold title of item i, ``titles[i, 1:]`` its negatives.
    """

    queries: np.ndarray  # (n, query_len) token ids
    titles: np.ndarray  # (n, 1 + n_neg, title_len)
    kinds: list[str]
    held_queries: np.ndarray
    held_titles: np.ndarray
    vocab_size: int


def make_toy_dataset(
    seed: int,
    vocab_size: int = 200,
    n_clean: int = 48,
    n_trivial: int = 24,
    n_noisy: int = 24,
    n_held: int = 64,
    n_neg: int = 8,
    query_len: int = 4,
    title_len: int = 3,
) -> ToyDataset:
    """Synthetic items of three kinds.

    clean: gold shares two tokens with the query, negatives share none.
    trivial: gold is drawn entirely from the query tokens.
    noisy: gold shares nothing with the query, while one negative shares two.
    Held-out items are all clean.
    """
    if title_len < 3 or query_len < title_len:
        raise ValueError("need title_len >= 3 and query_len >= title_len")
    rng = np.random.default_rng(seed)
    vocab = np.arange(vocab_size)

    def draw(n, avoid=()):
        pool = np.setdiff1d(vocab, np.asarray(avoid, dtype=int))
        return rng.choice(pool, n, replace=False).tolist()

    def related(q):
        return rng.choice(q, 2, replace=False).tolist() + draw(title_len - 2, q)

    def item(kind):
        q = draw(query_len)
        if kind == ITEM_CLEAN:
            titles = [related(q)] + [draw(title_len, q) for _ in range(n_neg)]
        elif kind == ITEM_TRIVIAL:
            titles = [rng.choice(q, title_len, replace=False).tolist()] + [draw(title_len, q) for _ in range(n_neg)]
        else:
            titles = [draw(title_len, q), related(q)] + [draw(title_len, q) for _ in range(n_neg - 1)]
        return q, titles

    kinds = [ITEM_CLEAN] * n_clean + [ITEM_TRIVIAL] * n_trivial + [ITEM_NOISY] * n_noisy
    train = [item(k) for k in kinds]
    held = [item(ITEM_CLEAN) for _ in range(n_held)]
    return ToyDataset(
        np.array([q for q, _ in train]),
        np.array([t for _, t in train]),
        kinds,
        np.array([q for q, _ in held]),
        np.array([t for _, t in held]),
        vocab_size,
    )


@dataclass
class TrainTrace:
    loss_kind: str
    seed: int
    losses: list[float] = field(default_factory=list)
    finite: list[bool] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    eval_accuracy: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def n_nonfinite(self) -> int:
        return self.finite.count(False)

    @property
    def max_finite_grad_norm(self) -> float:
        vals = [g for g, ok in zip(self.grad_norms, self.finite) if ok]
        return max(vals) if vals else float("nan")

    def to_json(self) -> dict:
        def clean(x):
            return float(x) if np.isfinite(x) else None

        return {
            "loss_kind": self.loss_kind,
            "seed": self.seed,
            "config": self.config,
            "n_nonfinite": self.n_nonfinite,
            "max_finite_grad_norm": clean(self.max_finite_grad_norm),
            "steps": [
                {"step": i, "loss": clean(l), "finite": ok, "grad_norm": clean(g)}
                for i, (l, ok, g) in enumerate(zip(self.losses, self.finite, self.grad_norms))
            ],
            "eval": [{"step": s, "pairwise_accuracy": a} for s, a in zip(self.eval_steps, self.eval_accuracy)],
        }


def toy_scores(emb: np.ndarray, queries: np.ndarray, titles: np.ndarray, logit_scale: float):
    """Scores ``sigmoid(scale * <mean query emb, mean title emb>)`` plus intermediates."""
    qv = emb[queries].mean(axis=1)
    tv = emb[titles].mean(axis=2)
    logits = logit_scale * np.einsum("nkd,nd->nk", tv, qv)
    return sigmoid(logits), logits, qv, tv


def pairwise_accuracy(emb: np.ndarray, queries: np.ndarray, titles: np.ndarray) -> float:
    """Fraction of (gold, negative) pairs where gold scores strictly higher."""
    qv = emb[queries].mean(axis=1)
    tv = emb[titles].mean(axis=2)
    z = np.einsum("nkd,nd->nk", tv, qv)
    return float((z[:, :1] > z[:, 1:]).mean())


def train_toy(
    loss_kind: LossKind | str,
    data: ToyDataset | None = None,
    steps: int = 2000,
    learning_rate: float = 0.05,
    seed: int = 0,
    cfg: LossConfig = LossConfig(),
    eval_every: int = 100,
    dim: int = 16,
    init_std: float = 0.3,
    logit_scale: float = 16.0,
) -> TrainTrace:
    """Full-batch gradient descent on a shared token-embedding table.

    Gradients go through the probability scores exactly as an autodiff
    framework would (dL/ds times s(1 - s)), so a score that saturates to
    exactly 0 or 1 turns the log loss non-finite. A non-finite step is
    recorded and its update skipped.
    """
    kind = LossKind(loss_kind)
    data = data if data is not None else make_toy_dataset(seed)
    rng = np.random.default_rng([seed, 1])
    emb = rng.normal(0.0, init_std, size=(data.vocab_size, dim))
    trace = TrainTrace(
        kind.value,
        seed,
        config={
            "steps": steps,
            "learning_rate": learning_rate,
            "eval_every": eval_every,
            "dim": dim,
            "init_std": init_std,
            "logit_scale": logit_scale,
            "loss_config": asdict(cfg),
        },
    )
    q_ids, t_ids = data.queries, data.titles
    q_len, t_len = q_ids.shape[1], t_ids.shape[2]
    for step in range(steps):
        if step % eval_every == 0:
            trace.eval_steps.append(step)
            trace.eval_accuracy.append(pairwise_accuracy(emb, data.held_queries, data.held_titles))
        s, _, qv, tv = toy_scores(emb, q_ids, t_ids, logit_scale)
        losses, d_scores = batch_loss_and_grad(kind, s[:, 0], s[:, 1:], cfg)
        with np.errstate(invalid="ignore", over="ignore"):
            d_logits = d_scores * s * (1.0 - s) * logit_scale
            g_q = np.einsum("nk,nkd->nd", d_logits, tv) / q_len
            g_t = d_logits[:, :, None] * qv[:, None, :] / t_len
            grad = np.zeros_like(emb)
            np.add.at(grad, q_ids, np.broadcast_to(g_q[:, None, :], (*q_ids.shape, dim)))
            np.add.at(grad, t_ids, np.broadcast_to(g_t[:, :, None, :], (*t_ids.shape, dim)))
            loss = float(losses.sum())
            gnorm = float(np.linalg.norm(grad))
        ok = bool(np.isfinite(loss) and np.isfinite(gnorm))
        trace.losses.append(loss)
        trace.finite.append(ok)
        trace.grad_norms.append(gnorm)
        if ok:
            emb -= learning_rate * grad
    trace.eval_steps.append(steps)
    trace.eval_accuracy.append(pairwise_accuracy(emb, data.held_queries, data.held_titles))
    return trace
