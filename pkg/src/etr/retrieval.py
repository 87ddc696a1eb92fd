"""First-stage retrieval: BM25 over titles, external candidate lists, negatives."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import random
import re
import struct
import warnings
import zlib
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

INDEX_MAGIC = b"ETRBM25\x00"
INDEX_VERSION = 1

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class Field(str, enum.Enum):
    TITLE = "TITLE"
    TITLE_PLUS_TEXT = "TITLE_PLUS_TEXT"


class Source(str, enum.Enum):
    GENRE_FILE = "GENRE_FILE"
    BM25 = "BM25"


class ShortfallWarning(UserWarning):
    """Fewer negatives were available than requested."""


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str = ""

    def __post_init__(self):
        if not self.title:
            raise ValueError(f"document {self.doc_id!r} has an empty title")


@dataclass(frozen=True)
class Candidate:
    doc_id: str
    source: Source
    first_stage_score: float


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumerics."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Bm25Index:
    doc_ids: list[str]
    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: list[int]
    field: Field = Field.TITLE_PLUS_TEXT
    k1: float = 1.2
    b: float = 0.75
    metadata: dict = dataclasses.field(default_factory=dict)

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def avg_doc_length(self) -> float:
        return sum(self.doc_lengths) / len(self.doc_lengths) if self.doc_lengths else 0.0

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def save(self, target) -> None:
        """Magic, version (uint32 LE), then zlib-compressed canonical JSON."""
        payload = {
            "doc_ids": self.doc_ids,
            "doc_lengths": self.doc_lengths,
            "postings": {t: [list(p) for p in ps] for t, ps in sorted(self.postings.items())},
            "field": self.field.value,
            "k1": self.k1,
            "b": self.b,
            "metadata": self.metadata,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        data = INDEX_MAGIC + struct.pack("<I", INDEX_VERSION) + zlib.compress(blob, 9)
        if hasattr(target, "write"):
            target.write(data)
        else:
            Path(target).write_bytes(data)

    @classmethod
    def load(cls, path: str | Path) -> "Bm25Index":
        raw = Path(path).read_bytes()
        head = len(INDEX_MAGIC)
        if raw[:head] != INDEX_MAGIC:
            raise ValueError(f"{path} is not a BM25 index file")
        (version,) = struct.unpack("<I", raw[head : head + 4])
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version} in {path}")
        payload = json.loads(zlib.decompress(raw[head + 4 :]))
        return cls(
            doc_ids=payload["doc_ids"],
            postings={t: [tuple(p) for p in ps] for t, ps in payload["postings"].items()},
            doc_lengths=payload["doc_lengths"],
            field=Field(payload["field"]),
            k1=payload["k1"],
            b=payload["b"],
            metadata=payload.get("metadata", {}),
        )


def document_terms(doc: Document, field: Field) -> list[str]:
    if Field(field) is Field.TITLE:
        return tokenize(doc.title)
    return tokenize(doc.title) + tokenize(doc.text)


def build_bm25_index(
    corpus: Sequence[Document], field: Field | str = Field.TITLE_PLUS_TEXT, k1: float = 1.2, b: float = 0.75
) -> Bm25Index:
    if not corpus:
        raise ValueError("cannot index an empty corpus")
    field = Field(field)
    seen: set[str] = set()
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths = []
    for ordinal, doc in enumerate(corpus):
        if doc.doc_id in seen:
            raise ValueError(f"duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        terms = document_terms(doc, field)
        lengths.append(len(terms))
        for term, tf in Counter(terms).items():
            postings.setdefault(term, []).append((ordinal, tf))
    return Bm25Index([d.doc_id for d in corpus], postings, lengths, field, k1, b)


def bm25_search(index: Bm25Index, query: str, k: int) -> list[Candidate]:
    """Top-k Okapi BM25; ties broken by doc_id. Documents with no matching term are omitted."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.doc_count == 0:
        raise ValueError("empty index")
    avg = index.avg_doc_length or 1.0
    scores: dict[int, float] = {}
    # each distinct query term counts once
    for term in dict.fromkeys(tokenize(query)):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for ordinal, tf in plist:
            norm = index.k1 * (1.0 - index.b + index.b * index.doc_lengths[ordinal] / avg)
            scores[ordinal] = scores.get(ordinal, 0.0) + idf * tf * (index.k1 + 1.0) / (tf + norm)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], index.doc_ids[kv[0]]))
    return [Candidate(index.doc_ids[o], Source.BM25, s) for o, s in ranked[:k]]


def genre_candidates(doc_ids: Iterable[str]) -> list[Candidate]:
    """Wrap an externally produced ranked id list; score is reciprocal rank."""
    return [Candidate(d, Source.GENRE_FILE, 1.0 / (r + 1)) for r, d in enumerate(doc_ids)]


def merge_candidates(genre_list: Sequence[Candidate], bm25_list: Sequence[Candidate], n: int) -> list[Candidate]:
    if n < 1:
        raise ValueError("n must be >= 1")
    out: list[Candidate] = []
    seen: set[str] = set()
    for cand in (*genre_list, *bm25_list):
        if cand.doc_id in seen:
            continue
        seen.add(cand.doc_id)
        out.append(cand)
        if len(out) == n:
            break
    return out


def sample_negatives(
    gold_id: str | Iterable[str],
    genre_list: Sequence[str],
    bm25_pool: Sequence[str],
    n_genre: int = 5,
    n_rand: int = 35,
    seed: int = 0,
) -> list[str]:
    """Top ``n_genre`` generative-retriever ids plus ``n_rand`` random pool ids.

    Gold ids are never returned. Pool sampling is uniform without replacement
    and excludes ids already taken from the genre list. Emits
    :class:`ShortfallWarning` when a pool cannot cover its quota.
    """
    gold = {gold_id} if isinstance(gold_id, str) else set(gold_id)
    chosen: list[str] = []
    for doc_id in dict.fromkeys(genre_list):
        if len(chosen) == n_genre:
            break
        if doc_id not in gold:
            chosen.append(doc_id)
    taken = gold | set(chosen)
    pool = [d for d in dict.fromkeys(bm25_pool) if d not in taken]
    if not chosen and not pool:
        raise ValueError("no negatives available after excluding gold")
    rng = random.Random(seed)
    drawn = rng.sample(pool, min(n_rand, len(pool)))
    shortfall = n_genre + n_rand - len(chosen) - len(drawn)
    if shortfall > 0:
        warnings.warn(f"negative sampling short by {shortfall}", ShortfallWarning, stacklevel=2)
    return chosen + drawn


def read_corpus(path: str | Path) -> list[Document]:
    docs = []
    for lineno, obj in read_jsonl(path):
        try:
            docs.append(Document(str(obj["doc_id"]), str(obj["title"]), str(obj.get("text", ""))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}, line {lineno}: bad corpus record ({exc})") from exc
    return docs


def read_jsonl(path: str | Path):
    """Yield ``(line_number, object)``; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}, line {lineno}: malformed JSON line ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ValueError(f"{path}, line {lineno}: expected a JSON object")
            yield lineno, obj


def candidate_to_json(c: Candidate) -> dict:
    d = asdict(c)
    d["source"] = c.source.value
    return d


def candidate_from_json(d: dict) -> Candidate:
    return Candidate(str(d["doc_id"]), Source(d["source"]), float(d["first_stage_score"]))
