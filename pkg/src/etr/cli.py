"""``etr`` command line: index, retrieve, rerank, eval, train-toy, bench.

Configuration comes from an optional JSON file (``--config``) with flag
overrides on top. Every artifact records the resolved RunConfig and seed,
either inline (JSON outputs, index, checkpoint) or in a ``<file>.meta.json``
sidecar next to line-oriented outputs (candidates, run file, train pool).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

from etr.bqe import CrossScope
from etr.losses import LossConfig, LossKind
from etr.model import ModelConfig, ScoreVariant, init_model, load_checkpoint, save_checkpoint
from etr.pipeline import (
    DATASET_STATS,
    RerankVariant,
    bench_latency,
    cost_report,
    make_toy_dataset,
    mean_recall_at_k,
    rerank,
    synthetic_workload,
    train_toy,
)
from etr.retrieval import (
    Bm25Index,
    Field,
    ShortfallWarning,
    bm25_search,
    build_bm25_index,
    candidate_from_json,
    candidate_to_json,
    genre_candidates,
    merge_candidates,
    read_corpus,
    read_jsonl,
    sample_negatives,
)

log = logging.getLogger("etr")

RETRIEVAL_PRESETS = {"default": (5, 1000), "entity_linking": (50, 1000)}
MAX_RECOMMENDED_DOCS = 400


@dataclass
class RunConfig:
    corpus: str | None = None
    queries: str | None = None
    index: str | None = None
    model: str | None = None
    candidates: str | None = None
    run: str | None = None
    output: str | None = None
    model_config: ModelConfig = field(default_factory=ModelConfig)
    loss_config: LossConfig = field(default_factory=LossConfig)
    index_field: str = Field.TITLE_PLUS_TEXT.value
    n_genre: int = 5
    n_bm25: int = 1000
    n_docs: int = 100
    variant: str = RerankVariant.BQE.value
    mono_variant: str = ScoreVariant.QUERY_BLIND.value
    cross_scope: str = CrossScope.QUERY_AND_TITLE.value
    eval_k: list[int] = field(default_factory=lambda: [1, 5, 10])
    loss_kind: str = LossKind.COMBINED_SIGMOID.value
    train_steps: int = 2000
    learning_rate: float = 0.05
    train_pool: str | None = None
    neg_genre: int = 5
    neg_random: int = 35
    dataset: str = "fever"
    bench_k: int = 40
    bench_queries: int = 5
    bench_repetitions: int = 5
    measure_latency: bool = False
    workers: int = 1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("model_config"), dict):
            d["model_config"] = ModelConfig(**d["model_config"])
        if isinstance(d.get("loss_config"), dict):
            d["loss_config"] = LossConfig(**d["loss_config"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def sub_seed(seed: int, name: str) -> int:
    """Stable named child seed, so each consumer of randomness is independent."""
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


# --- io helpers ---------------------------------------------------------------------


@contextmanager
def atomic_write(path: str | os.PathLike, mode: str = "w"):
    """Write to a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": "\n"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj, path) -> None:
    with atomic_write(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_sidecar(path, cfg: RunConfig, command: str) -> None:
    dump_json({"command": command, "seed": cfg.seed, "run_config": cfg.to_dict()}, f"{path}.meta.json")


def require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if getattr(cfg, name) is None:
            raise ValueError(f"missing required setting: --{name}")


def require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def read_queries(path: str) -> list[dict]:
    queries = []
    for lineno, obj in read_jsonl(path):
        if "qid" not in obj or "query" not in obj:
            raise ValueError(f"{path}, line {lineno}: query record needs 'qid' and 'query'")
        if "genre_candidates" not in obj:
            log.warning("query %s has no genre_candidates field; treating as empty", obj["qid"])
        queries.append(
            {
                "qid": str(obj["qid"]),
                "query": str(obj["query"]),
                "gold_ids": [str(g) for g in obj.get("gold_ids", [])],
                "genre_candidates": [str(g) for g in obj.get("genre_candidates", [])],
            }
        )
    return queries


def read_run(path: str) -> dict[str, list[str]]:
    """Run file -> qid -> doc ids in rank order."""
    rows: dict[str, list[tuple[int, str]]] = {}
    with open(require_file(path, "run file"), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}, line {lineno}: expected 5 tab-separated fields")
            qid, doc_id, rank = parts[0], parts[1], int(parts[2])
            rows.setdefault(qid, []).append((rank, doc_id))
    return {qid: [d for _, d in sorted(r)] for qid, r in rows.items()}


# --- commands -------------------------------------------------------------------------


def cmd_init_model(cfg: RunConfig) -> None:
    require(cfg, "model")
    params = init_model(cfg.model_config, sub_seed(cfg.seed, "model_init"))
    with atomic_write(cfg.model, "wb") as fh:
        save_checkpoint(params, fh)
    print(f"wrote {cfg.model}: {params.n_params} parameters, checksum {params.checksum()[:16]}")


def cmd_index(cfg: RunConfig) -> Bm25Index:
    require(cfg, "corpus", "index")
    corpus = read_corpus(require_file(cfg.corpus, "corpus file"))
    index = build_bm25_index(corpus, cfg.index_field)
    index.metadata = {"seed": cfg.seed, "run_config": cfg.to_dict()}
    with atomic_write(cfg.index, "wb") as fh:
        index.save(fh)
    print(f"indexed {index.doc_count} documents, avg length {index.avg_doc_length:.4f}")
    return index


def cmd_retrieve(cfg: RunConfig) -> None:
    require(cfg, "corpus", "queries", "index", "candidates")
    index = Bm25Index.load(require_file(cfg.index, "index file"))
    corpus = read_corpus(require_file(cfg.corpus, "corpus file"))
    known = {d.doc_id for d in corpus}
    queries = read_queries(require_file(cfg.queries, "queries file"))
    pool_index = build_bm25_index(corpus, Field.TITLE) if cfg.train_pool else None
    pool_rows = []
    with atomic_write(cfg.candidates) as fh:
        for q in queries:
            unknown = [g for g in q["genre_candidates"] if g not in known]
            if unknown:
                log.warning("query %s: dropping %d generative candidates not in corpus", q["qid"], len(unknown))
            genre = genre_candidates([g for g in q["genre_candidates"] if g in known])[: cfg.n_genre]
            bm25 = bm25_search(index, q["query"], cfg.n_bm25)
            merged = merge_candidates(genre, bm25, cfg.n_genre + cfg.n_bm25)
            fh.write(json.dumps({"qid": q["qid"], "candidates": [candidate_to_json(c) for c in merged]}) + "\n")
            if pool_index is not None and q["gold_ids"]:
                pool = [c.doc_id for c in bm25_search(pool_index, q["query"], cfg.n_bm25)]
                seed = sub_seed(cfg.seed, f"negatives:{q['qid']}")
                try:
                    with warnings.catch_warnings(record=True) as caught:
                        warnings.simplefilter("always", ShortfallWarning)
                        negs = sample_negatives(
                            q["gold_ids"], q["genre_candidates"], pool, cfg.neg_genre, cfg.neg_random, seed
                        )
                except ValueError:
                    log.warning("query %s: no negatives available", q["qid"])
                    continue
                for w in caught:
                    log.warning("query %s: %s", q["qid"], w.message)
                pool_rows.append({"qid": q["qid"], "gold_ids": q["gold_ids"], "negatives": negs})
    write_sidecar(cfg.candidates, cfg, "retrieve")
    if cfg.train_pool:
        with atomic_write(cfg.train_pool) as fh:
            for row in pool_rows:
                fh.write(json.dumps(row) + "\n")
        write_sidecar(cfg.train_pool, cfg, "retrieve")
    print(f"wrote candidates for {len(queries)} queries to {cfg.candidates}")


def cmd_rerank(cfg: RunConfig) -> None:
    require(cfg, "corpus", "queries", "candidates", "model", "run")
    if cfg.n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    if cfg.n_docs > MAX_RECOMMENDED_DOCS:
        log.warning("n_docs=%d is above the recommended maximum of %d", cfg.n_docs, MAX_RECOMMENDED_DOCS)
    params = load_checkpoint(cfg.model)
    corpus = {d.doc_id: d for d in read_corpus(require_file(cfg.corpus, "corpus file"))}
    texts = {q["qid"]: q["query"] for q in read_queries(require_file(cfg.queries, "queries file"))}
    jobs = []
    for lineno, row in read_jsonl(require_file(cfg.candidates, "candidates file")):
        qid = str(row["qid"])
        cands = [candidate_from_json(c) for c in row.get("candidates", [])]
        if not cands:
            log.warning("query %s has no candidates; skipped", qid)
            continue
        if qid not in texts:
            raise KeyError(f"{cfg.candidates}, line {lineno}: query {qid} not in queries file")
        jobs.append((qid, cands))

    def work(job):
        qid, cands = job
        return rerank(
            params, texts[qid], cands, cfg.n_docs, corpus, cfg.variant, qid=qid,
            mono_variant=cfg.mono_variant, cross_scope=cfg.cross_scope,
        )

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            ranked = list(pool.map(work, jobs))
    else:
        ranked = [work(j) for j in jobs]
    with atomic_write(cfg.run) as fh:
        for rl in ranked:
            for rank, (doc_id, score) in enumerate(rl.entries, start=1):
                fh.write(f"{rl.qid}\t{doc_id}\t{rank}\t{score!r}\t{rl.provenance}\n")
    write_sidecar(cfg.run, cfg, "rerank")
    print(f"reranked {len(ranked)} queries with {cfg.variant} into {cfg.run}")


def cmd_eval(cfg: RunConfig) -> dict:
    require(cfg, "run", "queries")
    runs = read_run(cfg.run)
    gold = {q["qid"]: q["gold_ids"] for q in read_queries(require_file(cfg.queries, "queries file")) if q["gold_ids"]}
    metrics = {f"recall@{k}": mean_recall_at_k(runs, gold, k) for k in sorted(set(cfg.eval_k))}
    out = {"metrics": metrics, "n_queries": len(gold), "seed": cfg.seed, "run_config": cfg.to_dict()}
    if cfg.output:
        dump_json(out, cfg.output)
    print(json.dumps(metrics, sort_keys=True))
    return out


def cmd_train_toy(cfg: RunConfig) -> dict:
    seed = sub_seed(cfg.seed, "toy_training")
    data = make_toy_dataset(sub_seed(cfg.seed, "toy_data"))
    trace = train_toy(cfg.loss_kind, data, cfg.train_steps, cfg.learning_rate, seed, cfg.loss_config)
    out = trace.to_json()
    out["run_config"] = cfg.to_dict()
    out["run_seed"] = cfg.seed
    if cfg.output:
        dump_json(out, cfg.output)
    print(
        f"{cfg.loss_kind}: non-finite steps {trace.n_nonfinite}, max finite grad norm "
        f"{trace.max_finite_grad_norm:.4g}, final held-out pairwise accuracy {trace.eval_accuracy[-1]:.4f}"
    )
    return out


def cmd_bench(cfg: RunConfig) -> dict:
    if cfg.dataset not in DATASET_STATS:
        raise ValueError(f"unknown dataset preset {cfg.dataset!r}; choose from {sorted(DATASET_STATS)}")
    stats = DATASET_STATS[cfg.dataset]
    mc = cfg.model_config
    report = cost_report(stats, cfg.bench_k, d_attn=mc.d_model, d_ff=mc.d_ff)
    if cfg.measure_latency:
        params = load_checkpoint(cfg.model) if cfg.model else init_model(mc, sub_seed(cfg.seed, "model_init"))
        work = synthetic_workload(
            cfg.bench_queries, round(stats.avg_query_tokens), round(stats.avg_title_tokens),
            round(stats.avg_passage_tokens), cfg.bench_k, mc.vocab_size, sub_seed(cfg.seed, "bench_workload"),
        )
        report.measured_latency = {}
        env = None
        for variant in RerankVariant:
            lat = bench_latency(params, work, variant, cfg.bench_repetitions)
            report.measured_latency[variant.value] = lat.median_seconds_per_query
            env = lat.environment
    else:
        env = None
    out = {
        "dataset": cfg.dataset,
        "stats": asdict(stats),
        "cost": asdict(report),
        "environment": env,
        "seed": cfg.seed,
        "run_config": cfg.to_dict(),
    }
    if cfg.output:
        dump_json(out, cfg.output)
    print(f"{cfg.dataset} k={cfg.bench_k}: token ratio vanilla_passage/bqe = {report.speedup_ratio_tokens:.4f}")
    print(f"{cfg.dataset} k={cfg.bench_k}: token ratio vanilla_title/bqe = {report.title_ratio_tokens:.4f}")
    if report.measured_latency:
        for name, sec in report.measured_latency.items():
            print(f"  {name:16s} {sec * 1e3:9.3f} ms/query")
    return out


COMMANDS = {
    "init-model": cmd_init_model,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "train-toy": cmd_train_toy,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON RunConfig; flags override its values")
    common.add_argument("--seed", type=int)
    for name in ("corpus", "queries", "index", "model", "candidates", "run", "output"):
        common.add_argument(f"--{name}")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="etr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("init-model", parents=[common], help="write a seeded toy model checkpoint")
    p = sub.add_parser("index", parents=[common], help="build a BM25 index from a JSONL corpus")
    p.add_argument("--index-field", choices=[f.value for f in Field])
    p = sub.add_parser("retrieve", parents=[common], help="merge generative-retriever and BM25 candidates")
    p.add_argument("--n-genre", type=int)
    p.add_argument("--n-bm25", type=int)
    p.add_argument("--preset", choices=sorted(RETRIEVAL_PRESETS), help="first-stage depths (n_genre, n_bm25)")
    p.add_argument("--train-pool", help="also write sampled training negatives here")
    p = sub.add_parser("rerank", parents=[common], help="rerank candidates with the toy model")
    p.add_argument("--n-docs", type=int)
    p.add_argument("--variant", choices=[v.value for v in RerankVariant])
    p.add_argument("--mono-variant", choices=[v.value for v in ScoreVariant])
    p.add_argument("--cross-scope", choices=[c.value for c in CrossScope])
    p.add_argument("--workers", type=int)
    p = sub.add_parser("eval", parents=[common], help="recall@k of a run file")
    p.add_argument("--k", dest="eval_k", type=int, nargs="+")
    p = sub.add_parser("train-toy", parents=[common], help="toy training run for one loss")
    p.add_argument("--loss", dest="loss_kind", choices=[k.value for k in LossKind])
    p.add_argument("--steps", dest="train_steps", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--gamma", type=float)
    p = sub.add_parser("bench", parents=[common], help="token/memory cost report, optional latency")
    p.add_argument("--dataset", choices=sorted(DATASET_STATS))
    p.add_argument("--k", dest="bench_k", type=int)
    p.add_argument("--queries-per-rep", dest="bench_queries", type=int)
    p.add_argument("--repetitions", dest="bench_repetitions", type=int)
    p.add_argument("--measure-latency", action="store_true", default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = {}
    if args.config:
        with open(require_file(args.config, "config file"), encoding="utf-8") as fh:
            base = json.load(fh)
    cfg = RunConfig.from_dict(base)
    overrides = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command", "verbose")}
    preset = overrides.pop("preset", None)
    if preset:
        cfg.n_genre, cfg.n_bm25 = RETRIEVAL_PRESETS[preset]
    gamma = overrides.pop("gamma", None)
    if gamma is not None:
        cfg.loss_config = dataclasses.replace(cfg.loss_config, gamma=gamma)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except (OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"etr {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
