"""Recall of the merged first-stage list and of the toy reranker as n_docs grows.

The model is untrained, so reranked recall only shows the mechanics; the
candidate-level coverage is the quantity that must not decrease.

    python3 scripts/run_ndocs_sweep.py --docs 400 --queries 40
"""

import argparse

from etr.model import ModelConfig, init_model
from etr.pipeline import mean_recall_at_k, rerank
from etr.retrieval import bm25_search, build_bm25_index, genre_candidates, merge_candidates
from etr.toydata import make_corpus, make_queries


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--docs", type=int, default=400)
    ap.add_argument("--queries", type=int, default=40)
    ap.add_argument("--n-docs", type=int, nargs="+", default=[10, 50, 100, 200, 300, 400])
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    corpus = make_corpus(args.docs, args.seed)
    lookup = {d.doc_id: d for d in corpus}
    queries = make_queries(corpus, args.queries, args.seed)
    index = build_bm25_index(corpus)
    params = init_model(ModelConfig(vocab_size=256, d_model=32, n_heads=4, d_head=8, d_ff=64), args.seed)
    first_stage = {
        q["qid"]: merge_candidates(genre_candidates(q["genre_candidates"]), bm25_search(index, q["query"], 1000), 1005)
        for q in queries
    }
    gold = {q["qid"]: q["gold_ids"] for q in queries}

    print(f"{'n_docs':>6s} {'coverage':>9s} {f'recall@{args.k}':>9s}")
    for n in args.n_docs:
        coverage = mean_recall_at_k({qid: [c.doc_id for c in c_list[:n]] for qid, c_list in first_stage.items()}, gold, n)
        runs = {q["qid"]: rerank(params, q["query"], first_stage[q["qid"]], n, lookup, "BQE", q["qid"]) for q in queries}
        print(f"{n:6d} {coverage:9.3f} {mean_recall_at_k(runs, gold, args.k):9.3f}")


if __name__ == "__main__":
    main()
