import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etr.bqe import (
    CrossScope,
    bqe_score,
    build_decoder_masks,
    build_encoder_mask,
    effective_positions,
    pack_batch,
)
from etr.model import ScoreVariant, mono_score_pair
from etr.tensor_core import NEG_LARGE

B = NEG_LARGE


@pytest.fixture
def batch():
    return pack_batch([10, 11], [("A", [20]), ("B", [21, 22])])


def visible_cols(mask, row):
    return set(np.flatnonzero(mask[row] == 0.0))


def test_pack_batch_example(batch):
    assert batch.tokens == (10, 11, 20, 21, 22)
    assert batch.segment_ids == (0, 0, 1, 2, 2)
    assert batch.query_len == 2
    assert batch.title_lens == (1, 2)
    assert batch.title_ids == ("A", "B")


def test_pack_batch_single_title():
    b = pack_batch([1, 2, 3], [("x", [4, 5])])
    assert b.segment_ids == (0, 0, 0, 1, 1)


def test_pack_batch_permutation():
    titles = [("A", [20]), ("B", [21, 22]), ("C", [23])]
    base = pack_batch([10], titles)
    for perm in itertools.permutations(titles):
        b = pack_batch([10], list(perm))
        assert sorted(zip(b.title_ids, b.title_lens)) == sorted(zip(base.title_ids, base.title_lens))
        assert len(b) == len(base)
        assert b.title_ids == tuple(t[0] for t in perm)


@pytest.mark.parametrize(
    ("query", "titles"),
    [([], [("a", [1])]), ([1], []), ([1], [("a", [2]), ("b", [])])],
)
def test_pack_batch_errors(query, titles):
    with pytest.raises(ValueError):
        pack_batch(query, titles)


def test_encoder_mask_example(batch):
    m = build_encoder_mask(batch)
    assert m.shape == (5, 5)
    assert visible_cols(m, 0) == visible_cols(m, 1) == {0, 1}
    assert visible_cols(m, 2) == {0, 1, 2}
    assert visible_cols(m, 3) == visible_cols(m, 4) == {0, 1, 3, 4}
    assert set(np.unique(m)) == {0.0, B}


def test_encoder_mask_single_title():
    b = pack_batch([1, 2], [("x", [3, 4, 5])])
    m = build_encoder_mask(b)
    blocked = {tuple(ix) for ix in np.argwhere(m == B)}
    assert blocked == {(i, j) for i in range(2) for j in range(2, 5)}


def test_positions_example(batch):
    assert effective_positions(batch) == [0, 1, 2, 2, 3]
    assert effective_positions(pack_batch([1, 2], [("x", [3, 4, 5])])) == [0, 1, 2, 3, 4]
    two = pack_batch([1], [("a", [5, 6, 7]), ("b", [8, 9, 4])])
    pos = effective_positions(two)
    assert pos[1:4] == pos[4:7]


def test_decoder_masks(batch):
    self_mask, cross = build_decoder_masks(batch, CrossScope.TITLE_ONLY)
    np.testing.assert_array_equal(self_mask, [[0.0, B], [B, 0.0]])
    assert visible_cols(cross, 0) == {2}
    assert visible_cols(cross, 1) == {3, 4}
    _, cross = build_decoder_masks(batch)
    assert visible_cols(cross, 0) == {0, 1, 2}
    assert visible_cols(cross, 1) == {0, 1, 3, 4}


titles_strategy = st.lists(st.lists(st.integers(4, 63), min_size=1, max_size=6), min_size=1, max_size=8)


@settings(max_examples=80, deadline=None)
@given(query=st.lists(st.integers(4, 63), min_size=1, max_size=10), titles=titles_strategy)
def test_mask_predicate_exhaustive(query, titles):
    b = pack_batch(query, list(enumerate(titles)))
    m = build_encoder_mask(b)
    seg = b.segment_ids
    for i in range(len(seg)):
        assert m[i, i] == 0.0
        for j in range(len(seg)):
            visible = seg[i] == seg[j] or (seg[i] > 0 and seg[j] == 0)
            assert (m[i, j] == 0.0) == visible


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    query=st.lists(st.integers(4, 63), min_size=1, max_size=12),
    titles=titles_strategy,
)
def test_bqe_matches_per_pair(small_params, seed, query, titles):
    scores = bqe_score(small_params, query, list(enumerate(titles)))
    for t, s in zip(titles, scores):
        assert abs(s - mono_score_pair(query, t, ScoreVariant.QUERY_BLIND, small_params)) <= 1e-9
        assert 0.0 < s < 1.0


def test_bqe_k1_equals_query_blind(params):
    s = bqe_score(params, [10, 11, 12], [("t", [20, 21])])
    assert s[0] == pytest.approx(mono_score_pair([10, 11, 12], [20, 21], "QUERY_BLIND", params), abs=1e-9)


def test_bqe_title_only_scope_differs(params):
    a = bqe_score(params, [10, 11, 12], [("t", [20, 21])], CrossScope.TITLE_ONLY)
    b = bqe_score(params, [10, 11, 12], [("t", [20, 21])], CrossScope.QUERY_AND_TITLE)
    assert 0.0 < a[0] < 1.0
    assert a[0] != b[0]


def test_bqe_title_only_independent_rows(params):
    titles = [("a", [20, 21]), ("b", [22]), ("c", [23, 24, 25])]
    full = bqe_score(params, [10, 11], titles, "TITLE_ONLY")
    for i, t in enumerate(titles):
        alone = bqe_score(params, [10, 11], [t], "TITLE_ONLY")
        assert abs(full[i] - alone[0]) <= 1e-9


def test_bqe_permutation_equivariant(small_params, rng):
    query = rng.integers(4, 64, 7).tolist()
    titles = [(i, rng.integers(4, 64, rng.integers(1, 6)).tolist()) for i in range(6)]
    base = dict(zip(range(6), bqe_score(small_params, query, titles)))
    perm = rng.permutation(6)
    shuffled = [titles[i] for i in perm]
    scores = bqe_score(small_params, query, shuffled)
    for (tid, _), s in zip(shuffled, scores):
        assert abs(s - base[tid]) <= 1e-12


def test_bqe_isolation(small_params, rng):
    query = rng.integers(4, 64, 9).tolist()
    titles = [(i, rng.integers(4, 64, rng.integers(1, 9)).tolist()) for i in range(10)]
    before = bqe_score(small_params, query, titles)
    after = bqe_score(small_params, query, titles + [("extra", [5, 6, 7])])
    assert max(abs(a - b) for a, b in zip(before, after[:-1])) <= 1e-9
