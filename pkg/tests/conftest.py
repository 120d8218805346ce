"""Shared fixtures and brute-force oracles.

The oracles here are written from the definitions directly (loops over
(i, j) pairs, explicit rank lists) and share no code with the package.
"""

import math

import numpy as np
import pytest

from qdst.attention import AttentionTrace
from qdst.pattern import Preset, TokenRole, build_layout, pad_layout

PRESETS = list(Preset)

# which global components each preset switches on: (query, sentence, cls)
PRESET_FLAGS = {
    Preset.LOCAL_ONLY: (False, False, False),
    Preset.QDS_Q: (True, False, True),
    Preset.QDS_S: (False, True, True),
    Preset.QDS: (True, True, True),
}


def brute_force_mask(layout, preset, w, symmetric=True):
    """Exhaustive (i, j) evaluation of the union adjacency."""
    preset = Preset.parse(preset)
    roles = list(layout.roles)
    n = len(roles)
    valid = [r != TokenRole.PAD for r in roles]
    m = np.zeros((n, n), dtype=bool)
    sos = [i for i, r in enumerate(roles) if r == TokenRole.SOS]
    lf_globals = {0} | ({sos[0]} if sos else set())
    for i in range(n):
        for j in range(n):
            if not (valid[i] and valid[j]):
                continue
            if preset is Preset.FULL:
                m[i, j] = True
                continue
            ok = abs(i - j) <= w // 2
            if preset is Preset.LONGFORMER_QA:
                ok = ok or i in lf_globals or j in lf_globals
            else:
                use_q, use_s, use_c = PRESET_FLAGS[preset]
                if use_q:
                    ok = ok or roles[i] == TokenRole.QUERY or (symmetric and roles[j] == TokenRole.QUERY)
                if use_s:
                    ok = ok or roles[j] == TokenRole.SOS or (symmetric and roles[i] == TokenRole.SOS)
                if use_c:
                    ok = ok or i == 0 or j == 0
            m[i, j] = ok
    return m


def random_layout(rng, n_max, with_pad=True, min_n=3):
    """A random valid layout with n <= n_max (roughly uniform over n)."""
    target = int(rng.integers(min_n, n_max + 1))
    pad = int(rng.integers(0, max(1, target // 4))) if with_pad and rng.random() < 0.3 else 0
    body = target - pad
    q_len = int(rng.integers(1, max(2, min(body - 2, 8) + 1)))
    q_len = max(1, min(q_len, body - 2))
    rest = body - q_len - 2
    sentences = []
    while rest >= 2:
        ln = int(rng.integers(1, min(rest - 1, 12) + 1))
        sentences.append(list(rng.integers(5, 50, size=ln)))
        rest -= ln + 1
    query = list(rng.integers(5, 50, size=q_len))
    layout = build_layout(query, sentences, max_len=body)
    if with_pad and layout.n < target:
        layout = pad_layout(layout, target)
    return layout


def naive_attention(h, w_q, w_k, w_v, w_f, num_heads, mask):
    """Loop-based multi-head attention with a 0/1 mask applied before softmax."""
    n, dim = h.shape
    dk = dim // num_heads
    q, k, v = h @ w_q.T, h @ w_k.T, h @ w_v.T
    ctx = np.zeros((n, dim))
    for head in range(num_heads):
        sl = slice(head * dk, (head + 1) * dk)
        for i in range(n):
            allowed = [j for j in range(n) if mask[i, j]]
            if not allowed:
                continue
            s = [float(q[i, sl] @ k[j, sl]) / math.sqrt(dk) for j in allowed]
            top = max(s)
            e = [math.exp(x - top) for x in s]
            z = math.fsum(e)
            for j, ej in zip(allowed, e):
                ctx[i, sl] += (ej / z) * v[j, sl]
    return ctx @ w_f.T


# --- metric oracles, direct formula evaluation -----------------------------------------


def trace_from_dense(pattern, dense):
    """CSR trace from an (h, n, n) weight tensor; only allowed entries are kept."""
    allowed = pattern.dense()
    indptr, indices = [0], []
    for i in range(pattern.n):
        cols = np.flatnonzero(allowed[i])
        indices.extend(cols)
        indptr.append(len(indices))
    indices = np.array(indices, dtype=np.int64)
    rows = np.repeat(np.arange(pattern.n), np.diff(indptr))
    return AttentionTrace(pattern, np.array(indptr), indices, dense[:, rows, indices])


def uniform(pattern, heads=2):
    allowed = pattern.dense().astype(float)
    support = allowed.sum(axis=1, keepdims=True)
    w = np.divide(allowed, support, out=np.zeros_like(allowed), where=support > 0)
    return trace_from_dense(pattern, np.repeat(w[None], heads, axis=0))


def oracle_dcg(grades, k, exp_gain=True):
    total = 0.0
    for r, g in enumerate(grades[:k], start=1):
        gain = (2 ** g - 1) if exp_gain else g
        total += gain / math.log2(r + 1)
    return total


def oracle_ndcg(ranked_grades, all_grades, k, exp_gain=True):
    ideal = oracle_dcg(sorted(all_grades, reverse=True), k, exp_gain)
    if ideal == 0:
        return 0.0
    return oracle_dcg(ranked_grades, k, exp_gain) / ideal


def oracle_rr(ranked_grades, k, thr=1):
    for r, g in enumerate(ranked_grades[:k], start=1):
        if g >= thr:
            return 1.0 / r
    return 0.0


def oracle_ap(ranked_grades, num_relevant, thr=1):
    if num_relevant == 0:
        return None
    hits, total = 0, 0.0
    for r, g in enumerate(ranked_grades, start=1):
        if g >= thr:
            hits += 1
            total += hits / r
    return total / num_relevant


def oracle_err(ranked_grades, k, max_grade):
    total, p_continue = 0.0, 1.0
    for r, g in enumerate(ranked_grades[:k], start=1):
        rel = (2 ** g - 1) / 2 ** max_grade
        total += p_continue * rel / r
        p_continue *= 1 - rel
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary ----------------------------------------------------------------------

# (criterion number, passed, one-line detail) appended by tests/test_acceptance.py
ACCEPTANCE_RESULTS = []
ACCEPTANCE_TABLES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}")
    for title, table in ACCEPTANCE_TABLES:
        terminalreporter.write_line("")
        terminalreporter.write_line(title)
        for line in table.splitlines():
            terminalreporter.write_line(line)
