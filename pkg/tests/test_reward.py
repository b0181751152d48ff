import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowsr.data import GENERATOR_KINDS, DegradationSpec, degrade, generate_hr, upsample
from flowsr.model import RejectedInput
from flowsr.reward import (DRAW, FIRST, LOSS, SECOND, SELF, TIE, WIN, AnnotationError, ProxyScorers,
                           anchor_scores, annotate_group, calibrate, compass_evaluate, compass_reward,
                           copeland_scores, fidelity_from_reference, gain_only_reward, gated_gain_reward,
                           pairwise_rank, proxy_quality, reward_formulation_variant, write_annotations)

# 0.9*4 + 0.9**(4/7)*0.5, printed by a standalone one-liner
R_09_4_45 = 4.0707852708233885
HEAVY = DegradationSpec(2.0, 0.05, 4, 0.4)
q = st.floats(1.0, 5.0)
f = st.floats(0.0, 1.0)


def test_reward_examples():
    assert compass_reward(1.0, 3.0, 4.2) == pytest.approx(4.2, abs=1e-12)
    assert compass_reward(0.0, 3.0, 4.0) == 0.0
    assert compass_reward(0.9, 4.0, 4.5, 7.0) == pytest.approx(R_09_4_45, abs=1e-12)


@pytest.mark.parametrize("args", [(-0.1, 3, 4), (1.1, 3, 4), (0.5, 0.5, 4), (0.5, 3, 5.5), (0.5, 3, np.nan)])
def test_reward_rejects_out_of_domain(args):
    with pytest.raises(RejectedInput):
        compass_reward(*args)
    with pytest.raises(RejectedInput):
        compass_reward(0.5, 3, 4, gamma=0)


@settings(max_examples=200)
@given(F=f, q_lr=q, q_sr=q, g=st.floats(0.5, 20))
def test_formulation_relations(F, q_lr, q_sr, g):
    full, gated, gain = (reward_formulation_variant(k)(F, q_lr, q_sr, g) for k in ("full", "gated_gain", "gain_only"))
    assert full == pytest.approx(F * q_lr + gated, abs=1e-12)
    assert gain == q_sr - q_lr == gain_only_reward(0.1, q_lr, q_sr)
    assert gated_gain_reward(1.0, q_lr, q_sr, g) == pytest.approx(q_sr - q_lr, abs=1e-12)
    assert compass_reward(1.0, q_lr, q_sr, g) - gated_gain_reward(1.0, q_lr, q_sr, g) == pytest.approx(q_lr, abs=1e-12)


@settings(max_examples=50)
@given(q_lr=q, dq=st.floats(0.0, 4.0))
def test_reward_nondecreasing_in_F(q_lr, dq):
    q_sr = min(5.0, q_lr + dq)
    r = compass_reward(np.linspace(0, 1, 101), q_lr, q_sr)
    assert np.all(np.diff(r) >= -1e-12)


@settings(max_examples=50)
@given(F=st.floats(0.01, 0.99), dq=st.floats(0.01, 1.0))
def test_gain_term_strictly_decreasing_in_q_lr(F, dq):
    g = [gated_gain_reward(F, ql, min(5.0, ql + dq)) / (min(5.0, ql + dq) - ql) for ql in (2.0, 3.0, 4.0)]
    assert g[0] > g[1] > g[2]


def test_unknown_formulation():
    with pytest.raises(RejectedInput):
        reward_formulation_variant("hybrid")


# ---------------------------------------------------------------------------
# proxies
# ---------------------------------------------------------------------------

def test_fidelity_identity_and_negative():
    yy, xx = np.mgrid[:64, :64]
    board = (((yy // 8) + (xx // 8)) % 2).astype(float)[..., None]
    assert fidelity_from_reference(board, board) == 1.0
    assert fidelity_from_reference(1 - board, board) < 0.5
    with pytest.raises(RejectedInput):
        fidelity_from_reference(board, board[:32])


def test_fidelity_decreases_with_noise():
    means = []
    for sigma in (0.0, 0.05, 0.1, 0.2):
        vals = []
        for s in range(20):
            x = generate_hr(GENERATOR_KINDS[s % 4], 64, np.random.default_rng([5, s]))
            noisy = np.clip(x + sigma * np.random.default_rng([6, s]).standard_normal(x.shape), 0, 1)
            vals.append(fidelity_from_reference(noisy, x))
        means.append(np.mean(vals))
    assert all(a > b for a, b in zip(means, means[1:])), means


def test_quality_range_determinism_and_calibration():
    wins = 0
    for s in range(100):
        rng = np.random.default_rng([4242, s])
        hr = generate_hr(GENERATOR_KINDS[s % 4], 64, rng)
        lq = degrade(hr, HEAVY, rng)
        qh, ql = proxy_quality(hr), proxy_quality(lq)
        assert 1.0 <= ql <= 5.0 and 1.0 <= qh <= 5.0
        wins += qh > ql
    assert wins >= 90
    assert proxy_quality(hr) == proxy_quality(hr.copy())


def test_anchor_scores_order_preserving():
    imgs = [generate_hr(k, 64, np.random.default_rng(i)) for i, k in enumerate(GENERATOR_KINDS)]
    sc = ProxyScorers()
    a = anchor_scores(sc, imgs)
    assert anchor_scores(sc, imgs[:1]).shape == (1,)
    perm = [2, 0, 3, 1]
    np.testing.assert_array_equal(anchor_scores(sc, [imgs[i] for i in perm]), a[perm])
    with pytest.raises(RejectedInput):
        anchor_scores(sc, [])


def test_compass_evaluate_modes():
    rng = np.random.default_rng(0)
    gt = generate_hr("shapes", 64, rng)
    lr = degrade(gt, DegradationSpec(1.0, 0.02, 4, 0.1), rng)
    b = compass_evaluate(lr, gt, gt)
    assert b.F == 1.0 and b.R == pytest.approx(b.Q_SR, abs=1e-12) and b.delta_Q == b.Q_SR - b.Q_LR
    assert b.R == pytest.approx(compass_reward(b.F, b.Q_LR, b.Q_SR, b.gamma), abs=1e-12)
    with pytest.raises(RejectedInput):
        compass_evaluate(lr, gt, None, fidelity_mode="reference")
    for s in range(20):
        g = generate_hr(GENERATOR_KINDS[s % 4], 64, np.random.default_rng([8, s]))
        l = degrade(g, DegradationSpec(1.0, 0.02, 4, 0.1), np.random.default_rng([9, s]))
        assert compass_evaluate(l, upsample(l, 4), fidelity_mode="predicted").F > 0.9


# ---------------------------------------------------------------------------
# annotation
# ---------------------------------------------------------------------------

def _order_comparator(values):
    """Comparator over integer 'images' by a fixed preference table."""
    def cmp(a, b):
        va, vb = values[int(a)], values[int(b)]
        return FIRST if va > vb else SECOND if va < vb else TIE
    return cmp


def test_pairwise_rank_cases():
    r, M = pairwise_rank(_order_comparator([1, 0]), [0, 1])
    np.testing.assert_array_equal(r, [1, 0])
    r, _ = pairwise_rank(_order_comparator([3, 2, 1, 0]), [0, 1, 2, 3])
    np.testing.assert_allclose(r, [1, 2 / 3, 1 / 3, 0], atol=1e-15)
    cycle = {(0, 1): FIRST, (1, 2): FIRST, (2, 0): FIRST}
    cyc = lambda a, b: cycle.get((a, b)) or {FIRST: SECOND}[cycle[(b, a)]]
    r, M = pairwise_rank(cyc, [0, 1, 2])
    np.testing.assert_array_equal(r, [0.5, 0.5, 0.5])
    assert (np.diag(M) == SELF).all()
    with pytest.raises(RejectedInput):
        pairwise_rank(cyc, [0])


def test_outcome_matrix_antisymmetric_and_order_invariant():
    imgs = [generate_hr("textures", 64, np.random.default_rng(i)) for i in range(5)]
    r, M = pairwise_rank(ProxyScorers(), imgs)
    off = ~np.eye(5, dtype=bool)
    assert np.array_equal(M[off], -M.T[off])
    flipped = lambda a, b: {FIRST: SECOND, SECOND: FIRST, TIE: TIE}[ProxyScorers().compare(b, a)]
    np.testing.assert_array_equal(pairwise_rank(flipped, imgs)[0], r)


def test_inconsistent_comparator_raises():
    with pytest.raises(AnnotationError):
        pairwise_rank(lambda a, b: FIRST, [0, 1])


def test_copeland_ties_count_half():
    M = np.array([[SELF, DRAW, WIN], [DRAW, SELF, WIN], [LOSS, LOSS, SELF]])
    np.testing.assert_array_equal(copeland_scores(M), [1, 1, 0])


def test_calibration_examples():
    a, b, qh = calibrate([0, 1], [2, 4])
    assert (a, b) == (2.0, 2.0)
    np.testing.assert_array_equal(qh, [2, 4])
    a, b, qh = calibrate([0.5, 0.5, 0.5], [2, 3, 4.5])
    assert a == 0.0
    np.testing.assert_allclose(qh, np.mean([2, 3, 4.5]))
    a, b, _ = calibrate([0, 0.5, 1], [2, 2.5, 4])
    assert a == pytest.approx(2.0) and b == pytest.approx(11 / 6)
    with pytest.raises(RejectedInput):
        calibrate([0, 1], [1, 2, 3])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(1, 5)), min_size=2, max_size=12))
def test_calibration_preserves_rank_order_when_alpha_positive(pairs):
    r, qv = map(np.array, zip(*pairs))
    a, b, _ = calibrate(r, qv)
    if a > 0:
        raw = a * r + b
        for i, j in itertools.permutations(range(len(r)), 2):
            if r[i] < r[j]:
                assert raw[i] <= raw[j]


def test_clamping_and_negative_alpha_flag(tmp_path):
    a, b, qh = calibrate([0, 0.5, 1], [1.0, 1.0, 5.0])
    assert qh.min() >= 1.0 and qh.max() <= 5.0
    imgs = [generate_hr("textures", 64, np.random.default_rng(i)) for i in range(3)]
    g = annotate_group(np.zeros((16, 16, 1)), imgs, ids=["a", "b", "c"])
    g.alpha = -1.0
    write_annotations(tmp_path / "ann.jsonl", [g])
    rec = json.loads((tmp_path / "ann.jsonl").read_text())
    assert rec["alpha_negative"] is True and rec["outcomes"][0] == "-" and len(rec["outcomes"]) == 9
