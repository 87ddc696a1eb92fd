"""Small synthetic Wikipedia-like corpora for demos and tests."""

from __future__ import annotations

import json
import random
from pathlib import Path

from etr.retrieval import Document

_WORDS = (
    "river castle comedy film album station battle county island church novel league "
    "museum bridge valley festival opera tower harbor railway poet empire garden "
    "mountain palace theatre studio academy symphony lake forest desert canyon"
).split()
_NAMES = (
    "benny hill savage marlow quinn ashford delacroix okafor lindqvist moreau "
    "tanaka varga oduya halvorsen brandt castell iversen novak"
).split()
_FILLER = "the a of in on at with and for from by about known famous early history".split()


def make_corpus(n_docs: int = 50, seed: int = 0) -> list[Document]:
    rng = random.Random(seed)
    docs, titles = [], set()
    while len(docs) < n_docs:
        n = rng.choice((1, 2, 2, 3))
        words = rng.sample(_NAMES, 1) + rng.sample(_WORDS, n - 1) if rng.random() < 0.5 else rng.sample(_WORDS, n)
        title = " ".join(w.capitalize() for w in words)
        if rng.random() < 0.2:
            title += f" ({rng.randint(1950, 2020)} {rng.choice(['TV film', 'album', 'novel'])})"
        if title in titles:
            continue
        titles.add(title)
        body = " ".join(rng.choice(_WORDS + _FILLER) for _ in range(rng.randint(8, 30)))
        docs.append(Document(f"D{len(docs):04d}", title, body))
    return docs


def make_queries(corpus: list[Document], n_queries: int = 12, seed: int = 0, n_genre: int = 5) -> list[dict]:
    """Queries mentioning their gold title's words, plus a noisy generative list."""
    rng = random.Random(seed)
    ids = [d.doc_id for d in corpus]
    out = []
    for i, gold in enumerate(rng.sample(corpus, n_queries)):
        words = gold.title.lower().replace("(", "").replace(")", "").split()
        query = " ".join(rng.sample(_FILLER, 3) + words + rng.sample(_WORDS, 2))
        genre = rng.sample(ids, n_genre)
        if rng.random() < 0.6 and gold.doc_id not in genre:
            genre[rng.randrange(n_genre)] = gold.doc_id
        out.append({"qid": f"q{i}", "query": query, "gold_ids": [gold.doc_id], "genre_candidates": genre})
    return out


def write_jsonl(rows, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def write_toy_files(directory: str | Path, n_docs: int = 50, n_queries: int = 12, seed: int = 0) -> tuple[Path, Path]:
    """Write ``corpus.jsonl`` and ``queries.jsonl``; return their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    corpus = make_corpus(n_docs, seed)
    corpus_path, queries_path = directory / "corpus.jsonl", directory / "queries.jsonl"
    write_jsonl(({"doc_id": d.doc_id, "title": d.title, "text": d.text} for d in corpus), corpus_path)
    write_jsonl(make_queries(corpus, n_queries, seed), queries_path)
    return corpus_path, queries_path
