"""Broadcasting query encoder: score k titles against one query in one pass.

The query and all titles are packed into one sequence. A block mask keeps the
query blind to titles and titles blind to each other, and every title is
given positions starting right after the query. Each title then sees exactly
what it would see in a query-blind per-pair encoding, so the packed scores
match per-pair scores up to float rounding.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from etr.model import ModelParams, decode_yes_no_logits, encode, yes_probability
from etr.tensor_core import visible_mask


class CrossScope(str, enum.Enum):
    QUERY_AND_TITLE = "QUERY_AND_TITLE"
    TITLE_ONLY = "TITLE_ONLY"


@dataclass(frozen=True)
class PackedBatch:
    tokens: tuple[int, ...]
    segment_ids: tuple[int, ...]
    query_len: int
    title_lens: tuple[int, ...]
    title_ids: tuple[Hashable, ...]

    @property
    def k(self) -> int:
        return len(self.title_lens)

    def __len__(self) -> int:
        return len(self.tokens)


def pack_batch(query: Sequence[int], titles: Sequence[tuple[Hashable, Sequence[int]]]) -> PackedBatch:
    if len(query) == 0:
        raise ValueError("query must be non-empty")
    if len(titles) == 0:
        raise ValueError("at least one title is required")
    tokens = list(query)
    segments = [0] * len(query)
    lens, ids = [], []
    for t, (title_id, title) in enumerate(titles, start=1):
        if len(title) == 0:
            raise ValueError(f"title {title_id!r} is empty")
        tokens.extend(title)
        segments.extend([t] * len(title))
        lens.append(len(title))
        ids.append(title_id)
    return PackedBatch(tuple(int(x) for x in tokens), tuple(segments), len(query), tuple(lens), tuple(ids))


def encoder_visibility(batch: PackedBatch) -> np.ndarray:
    """Boolean (n, n): same segment, or a title row looking at the query."""
    seg = np.asarray(batch.segment_ids)
    return (seg[:, None] == seg[None, :]) | ((seg[:, None] > 0) & (seg[None, :] == 0))


def build_encoder_mask(batch: PackedBatch) -> np.ndarray:
    return visible_mask(encoder_visibility(batch))


def effective_positions(batch: PackedBatch) -> list[int]:
    positions = list(range(batch.query_len))
    for n in batch.title_lens:
        positions.extend(range(batch.query_len, batch.query_len + n))
    return positions


def build_decoder_masks(
    batch: PackedBatch, cross_scope: CrossScope | str = CrossScope.QUERY_AND_TITLE
) -> tuple[np.ndarray, np.ndarray]:
    """(self mask k x k, cross mask k x n) for k decoder start tokens."""
    k = batch.k
    seg = np.asarray(batch.segment_ids)
    rows = np.arange(1, k + 1)[:, None]
    cross = seg[None, :] == rows
    if CrossScope(cross_scope) is CrossScope.QUERY_AND_TITLE:
        cross = cross | (seg[None, :] == 0)
    return visible_mask(np.eye(k, dtype=bool)), visible_mask(cross)


def bqe_score(
    params: ModelParams,
    query: Sequence[int],
    titles: Sequence[tuple[Hashable, Sequence[int]]],
    cross_scope: CrossScope | str = CrossScope.QUERY_AND_TITLE,
) -> list[float]:
    """One encoder pass over the packed batch, one k-row decoder pass.

    Returns the YES probability for each title, in input order.
    """
    batch = pack_batch(query, titles)
    states = encode(batch.tokens, build_encoder_mask(batch), effective_positions(batch), params)
    self_mask, cross_mask = build_decoder_masks(batch, cross_scope)
    logits = decode_yes_no_logits(states, self_mask, cross_mask, params)
    return [float(s) for s in yes_probability(logits)]
