import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import PRESETS, brute_force_mask, random_layout
from qdst.errors import InvalidInput
from qdst.pattern import (
    BlockSparsePattern,
    PatternConfig,
    Preset,
    SequenceLayout,
    TokenRole,
    build_layout,
    build_pattern,
    cls_mask,
    local_mask,
    pad_layout,
    query_mask,
    sentence_mask,
    sparsity,
    synthetic_layout,
    union,
)

R = TokenRole


def who_is_gray():
    # who is gray / robert gray. a captain.
    return build_layout([10, 11, 12], [[13, 12], [14, 15]], max_len=32)


# --- layouts -----------------------------------------------------------------------------


def test_layout_concatenation():
    lay = who_is_gray()
    assert list(lay.roles) == [R.CLS, R.QUERY, R.QUERY, R.QUERY, R.SEP, R.SOS, R.DOC, R.DOC, R.SOS, R.DOC, R.DOC]
    assert lay.n == 11
    assert list(lay.sentence_starts) == [5, 8]
    assert list(lay.query_span) == [1, 2, 3]


def test_layout_empty_document():
    lay = build_layout([7], [])
    assert list(lay.roles) == [R.CLS, R.QUERY, R.SEP]
    assert lay.sentence_starts == ()


def test_layout_truncation_keeps_prefix():
    lay = build_layout([5, 6], [[7, 8, 9]], max_len=6)
    assert list(lay.roles) == [R.CLS, R.QUERY, R.QUERY, R.SEP, R.SOS, R.DOC]


def test_layout_truncation_drops_bare_sos():
    lay = build_layout([5, 6], [[7], [8, 9]], max_len=7)
    # the second [SOS] would have no content left, so it is dropped
    assert list(lay.roles) == [R.CLS, R.QUERY, R.QUERY, R.SEP, R.SOS, R.DOC]
    assert list(lay.sentence_starts) == [4]


@pytest.mark.parametrize("query, max_len", [([], 10), ([1, 2, 3], 4)])
def test_layout_rejects(query, max_len):
    with pytest.raises(InvalidInput):
        build_layout(query, [[5]], max_len=max_len)


def test_layout_rejects_empty_sentence():
    with pytest.raises(InvalidInput):
        build_layout([5], [[6], []])


def test_layout_validation_catches_bad_roles():
    with pytest.raises(InvalidInput):
        SequenceLayout(
            roles=np.array([R.CLS, R.QUERY, R.SEP, R.PAD, R.DOC]),
            token_ids=np.array([2, 9, 3, 0, 9]),
            query_span=range(1, 2),
            sentence_starts=(),
        )


def test_pad_layout_suffix():
    lay = pad_layout(who_is_gray(), 16)
    assert lay.n == 16 and lay.n_valid == 11
    assert all(r == R.PAD for r in lay.roles[11:])


# --- component masks ---------------------------------------------------------------------


@pytest.mark.parametrize("n, w, expected", [(4, 2, 10), (5, 0, 5), (3, 8, 9)])
def test_local_mask_counts(n, w, expected):
    assert local_mask(n, w).nonzeros == expected


def test_local_mask_odd_window():
    with pytest.raises(InvalidInput, match="even"):
        local_mask(5, 3)


def test_sentence_mask_count():
    assert sentence_mask(who_is_gray()).nonzeros == 2 * 11 + 11 * 2 - 4


def test_sentence_mask_without_sentences():
    assert sentence_mask(build_layout([5], [])).nonzeros == 0


def test_query_mask_counts():
    lay = SequenceLayout(
        roles=np.array([R.CLS, R.QUERY, R.QUERY, R.SEP, R.DOC]),
        token_ids=np.array([2, 5, 6, 3, 9]),
        query_span=range(1, 3),
        sentence_starts=(),
    )
    assert query_mask(lay).nonzeros == 2 * 5 + 5 * 2 - 4
    assert query_mask(build_layout([5], [])).nonzeros == 3 + 3 - 1


def test_query_mask_no_document_brute_force():
    lay = build_layout([5, 6, 7], [])
    m = query_mask(lay).dense()
    expect = np.zeros((5, 5), bool)
    for i in range(5):
        for j in range(5):
            expect[i, j] = i in (1, 2, 3) or j in (1, 2, 3)
    assert (m == expect).all()


@pytest.mark.parametrize("n, expected", [(4, 7), (3, 5)])
def test_cls_mask_counts(n, expected):
    lay = build_layout([5] * (n - 2), [])
    assert cls_mask(lay).nonzeros == expected


# --- build_pattern -----------------------------------------------------------------------


def test_qds_example_matches_brute_force():
    lay = who_is_gray()
    pat = build_pattern(lay, PatternConfig(2, "qds"))
    oracle = brute_force_mask(lay, "qds", 2)
    assert (pat.dense() == oracle).all()
    assert pat.nonzeros == oracle.sum()


def test_full_pattern_counts():
    lay = who_is_gray()
    stats = sparsity(build_pattern(lay, PatternConfig(2, "full")))
    assert stats.nonzeros == 121 and stats.fraction == 1.0


def test_local_only_equals_local_mask():
    lay = who_is_gray()
    a = build_pattern(lay, PatternConfig(4, "local")).dense()
    b = local_mask(lay.n, 4).dense()
    assert (a == b).all()


def test_longformer_globals():
    lay = who_is_gray()
    pat = build_pattern(lay, PatternConfig(2, "longformer_qa"))
    assert list(pat.global_rows) == [0, 5] and list(pat.global_cols) == [0, 5]


def test_pad_excluded_everywhere():
    lay = pad_layout(who_is_gray(), 15)
    for preset in PRESETS:
        d = build_pattern(lay, PatternConfig(4, preset)).dense()
        assert not d[11:].any() and not d[:, 11:].any()


def test_sparsity_examples():
    lay = build_layout([5] * 6, [])
    assert sparsity(build_pattern(lay, PatternConfig(0, "full"))).fraction == 1.0
    assert sparsity(local_mask(8, 0)).fraction == 1 / 8


def test_sparsity_band_at_2048():
    lay = synthetic_layout(2048, query_len=10, sentence_len=50, num_sentences=40)
    assert lay.num_sentences == 40
    frac = sparsity(build_pattern(lay, PatternConfig(128, "qds"))).fraction
    assert 0.05 <= frac <= 0.25


def test_asymmetric_switch():
    lay = who_is_gray()
    pat = build_pattern(lay, PatternConfig(0, "qds", symmetric_globals=False))
    assert pat.contains(1, 10) and not pat.contains(10, 1)  # query rows only
    assert pat.contains(10, 5) and not pat.contains(6, 10)  # SOS columns only
    assert (pat.dense() == brute_force_mask(lay, "qds", 0, symmetric=False)).all()


def test_union_mismatched_lengths():
    with pytest.raises(InvalidInput):
        union(local_mask(4, 2), local_mask(5, 2))


def test_pattern_config_roundtrip():
    cfg = PatternConfig(16, "qds_s")
    assert PatternConfig.from_dict(cfg.to_dict()) == cfg


def test_preset_aliases():
    assert Preset.parse("LOCAL_ONLY") is Preset.LOCAL_ONLY
    with pytest.raises(InvalidInput):
        Preset.parse("dense")


# --- properties --------------------------------------------------------------------------


def test_exhaustive_small_n():
    rng = np.random.default_rng(3)
    for _ in range(60):
        lay = random_layout(rng, 40)
        w = int(rng.integers(0, 10)) * 2
        for preset in PRESETS:
            pat = build_pattern(lay, PatternConfig(w, preset))
            oracle = brute_force_mask(lay, preset, w)
            assert (pat.dense() == oracle).all(), (preset, w, lay.roles)
            assert pat.nonzeros == int(oracle.sum())
            assert (pat.row_support() == oracle.sum(axis=1)).all()


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), w=st.integers(0, 12).map(lambda k: 2 * k))
def test_union_and_row_nonempty(seed, w):
    lay = random_layout(np.random.default_rng(seed), 48)
    pat = build_pattern(lay, PatternConfig(w, "qds"))
    parts = union(local_mask(lay.n, w, lay.n_valid), sentence_mask(lay), query_mask(lay), cls_mask(lay))
    assert (pat.dense() == parts.dense()).all()
    assert (pat.dense().sum(axis=1)[: lay.n_valid] >= 1).all()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_global_symmetry(seed):
    lay = random_layout(np.random.default_rng(seed), 48)
    d = build_pattern(lay, PatternConfig(2, "qds")).dense()
    g = set(lay.query_span) | set(lay.sentence_starts) | {0}
    nv = lay.n_valid
    for i in g:
        assert (d[i, :nv] == d[:nv, i]).all()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_monotone_in_window_and_flags(seed):
    lay = random_layout(np.random.default_rng(seed), 48)
    counts = [build_pattern(lay, PatternConfig(w, "qds")).nonzeros for w in range(0, 20, 2)]
    assert counts == sorted(counts)
    nz = {p: build_pattern(lay, PatternConfig(4, p)).nonzeros for p in ("local", "qds_q", "qds_s", "qds")}
    assert nz["local"] <= nz["qds_q"] <= nz["qds"]
    assert nz["local"] <= nz["qds_s"] <= nz["qds"]


def test_local_w0_sparsity_counts_valid_only():
    lay = pad_layout(who_is_gray(), 20)
    s = sparsity(build_pattern(lay, PatternConfig(0, "local")))
    assert s.nonzeros == 11 and s.fraction == 11 / 400


def test_synthetic_layout_exact_length():
    for n in (17, 64, 257, 512):
        lay = synthetic_layout(n, query_len=4, sentence_len=6, seed=n)
        assert lay.n == n and lay.n_valid == n


def test_contains_agrees_with_dense():
    lay = pad_layout(who_is_gray(), 13)
    pat = build_pattern(lay, PatternConfig(2, "qds"))
    d = pat.dense()
    assert all(pat.contains(i, j) == d[i, j] for i in range(13) for j in range(13))
    assert isinstance(pat, BlockSparsePattern)
