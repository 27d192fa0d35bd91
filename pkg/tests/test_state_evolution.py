import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spikedmt.errors import ConfigurationError
from spikedmt.model import ModelParams
from spikedmt.phase import rank_one_system_solve, sequential_overlaps
from spikedmt.state_evolution import (SEKind, as_overlaps, channel_map, run_se,
                                      run_sequential_se, se_jacobian, se_step, spectral_radius)

P = ModelParams(0.7, 0.3, 1.5, 0.8, 1.0)
KINDS = [SEKind.bayes(), SEKind.ml(1.0), SEKind.ml(0.5), SEKind.ml(2.0), SEKind.stage1(),
         SEKind.stage2(0.6)]

params_st = st.builds(
    ModelParams,
    st.floats(0.1, 3.0), st.floats(0.05, 3.0), st.floats(0.2, 4.0),
    st.floats(0.2, 3.0), st.floats(0.2, 3.0), st.floats(0.2, 10.0))
q_st = st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4).map(np.array)


def test_overlap_validation():
    with pytest.raises(ConfigurationError):
        as_overlaps([0.1, 0.2, np.nan, 0.0])
    with pytest.raises(ConfigurationError):
        as_overlaps([0.1, 0.2, 1.5, 0.0])
    with pytest.raises(ConfigurationError):
        as_overlaps([0.1, 0.2])
    with pytest.raises(ConfigurationError):
        SEKind.stage2(1.5)


def test_channel_map_values():
    assert np.array_equal(channel_map(np.zeros(4), P), np.zeros(4))
    g = channel_map([0.5] * 4, P, 1.0)
    assert g[0] == pytest.approx(1.5 / 0.7 * 0.5 + 0.8 / 0.3 * 0.25, abs=1e-15)
    assert g[0] == pytest.approx(1.738095, abs=1e-6)
    g = channel_map([0.5] * 4, P, math.inf)
    assert g[0] == pytest.approx(1.5 / 0.7 * 0.5) and g[2] == 0 and g[3] == 0


def test_bayes_step_values():
    assert np.array_equal(se_step(np.zeros(4), SEKind.bayes(), P), np.zeros(4))
    q = se_step([0.5] * 4, SEKind.bayes(), P)
    assert q[0] == pytest.approx(1.738095238095238 / 2.738095238095238, abs=1e-15)
    assert q[0] == pytest.approx(0.634782, abs=1e-6)
    qm = np.array([1.01 / 2.2, 1.01 / (1.5 * 1.7), 0, 0])
    assert qm[0] == pytest.approx(0.459091, abs=1e-6) and qm[1] == pytest.approx(0.396078, abs=1e-6)
    assert np.max(np.abs(se_step(qm, SEKind.bayes(), P) - qm)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(params_st, q_st, st.sampled_from(range(len(KINDS))))
def test_step_maps_unit_cube_into_itself(p, q, ki):
    out = se_step(q, KINDS[ki], p)
    assert np.all(out >= 0) and np.all(out <= 1)


@settings(max_examples=100, deadline=None)
@given(params_st, q_st)
def test_ml_tensor_components_do_not_depend_on_rho(p, q):
    outs = [se_step(q, SEKind.ml(r), p)[2:] for r in (0.5, 1.0, 2.0)]
    assert np.allclose(outs[0], outs[1], rtol=1e-12, atol=1e-15)
    assert np.allclose(outs[0], outs[2], rtol=1e-12, atol=1e-15)


def test_run_se_regions():
    r = run_se(np.full(4, 0.05), SEKind.bayes(), ModelParams(1.5, 1.0, 1.5, 0.8, 1.0), tol=1e-12)
    assert r.converged and np.max(r.q) < 1e-10
    r = run_se(np.full(4, 0.05), SEKind.bayes(), ModelParams(0.7, 0.8, 1.5, 0.8, 1.0), tol=1e-14)
    assert np.allclose(r.q, [1.01 / 2.2, 1.01 / 2.55, 0, 0], atol=1e-10)
    assert r.trace.shape == (r.iterations + 1, 4) and np.allclose(r.trace[0], 0.05)


def test_run_se_init_dependence_in_coexistence_band():
    p = ModelParams(1.0, 0.24, 1.5, 0.8, 1.0)
    lo = run_se(np.full(4, 0.05), SEKind.bayes(), p, tol=1e-13)
    hi = run_se(np.full(4, 0.9), SEKind.bayes(), p, tol=1e-13)
    assert hi.q[2] > 0.5 and lo.q[2] < 1e-8
    assert np.max(np.abs(lo.q - hi.q)) > 0.3


def test_run_se_nonconvergence_flag():
    r = run_se(np.full(4, 0.05), SEKind.bayes(), P, tol=1e-15, max_iters=3)
    assert not r.converged and r.iterations == 3
    with pytest.raises(ConfigurationError):
        run_se(np.zeros(4), SEKind.bayes(), P, tol=0)


def test_scalar_and_vector_paths_agree():
    for kind in (SEKind.bayes(), SEKind.ml(2.0)):
        a = run_se(np.full(4, 0.3), kind, P, tol=1e-13, keep_trace=True)
        b = run_se(np.full(4, 0.3), kind, P, tol=1e-13, keep_trace=False)
        assert np.allclose(a.q, b.q, atol=1e-13) and a.iterations == b.iterations


def test_jacobian_at_origin():
    J = se_jacobian(np.zeros(4), SEKind.bayes(), P)
    want = np.zeros((4, 4))
    want[0, 1] = 1.5 / 0.7
    want[1, 0] = 1 / 0.7
    assert np.allclose(J, want, atol=1e-15)
    assert spectral_radius(J) == pytest.approx(math.sqrt(1.5) / 0.7, rel=1e-12)


@pytest.mark.parametrize("ki", range(len(KINDS)))
def test_jacobian_matches_finite_differences(ki):
    kind = KINDS[ki]
    rng = np.random.default_rng(ki)
    h = 1e-6
    for _ in range(10):
        q = rng.uniform(0.05, 0.95, 4)
        J = se_jacobian(q, kind, P)
        num = np.empty((4, 4))
        for l in range(4):
            e = np.zeros(4)
            e[l] = h
            num[:, l] = (se_step(q + e, kind, P) - se_step(q - e, kind, P)) / (2 * h)
        if kind.name == "seq1":
            J, num = J[:2, :2], num[:2, :2]
        elif kind.name == "seq2":
            J, num = J[2:, 2:], num[2:, 2:]
        assert np.max(np.abs(J - num)) < 1e-6


def test_tensor_block_stability_flips_at_delta_c():
    from spikedmt.phase import delta_c_bayes
    dc = delta_c_bayes(P)
    qm = np.array([1.01 / 2.2, 1.01 / 2.55, 0, 0])
    for dt, stable in ((dc * 1.01, True), (dc * 0.99, False)):
        J = se_jacobian(qm, SEKind.bayes(), P.replace(delta_t=dt))
        assert (spectral_radius(J[2:, 2:]) < 1) == stable


def test_sequential_stage_two_reaches_spectral_overlaps():
    for dm, dt in ((0.7, 0.3), (0.4, 0.5), (1.0, 0.1)):
        p = ModelParams(dm, dt, 1.5, 0.8, 1.0)
        qs = sequential_overlaps(p)
        res = run_sequential_se(p, tol=1e-15, max_iters=10 ** 6)
        assert np.max(np.abs(res.q - qs)) < 1e-8


def test_stage_one_is_matrix_only():
    q = np.array([0.3, 0.4, 0.7, 0.2])
    out = se_step(q, SEKind.stage1(), P)
    assert out[2] == 0.7 and out[3] == 0.2
    out = se_step(q, SEKind.stage2(0.5), P)
    assert out[0] == 0.5 and out[1] == 0.4


def test_ml_matrix_fixed_point_from_lemma():
    # ML matrix FP squares solve the rank-one system with alpha2 -> alpha2 tilde
    p = ModelParams(0.7, 0.8, 1.5, 0.8, 1.0)
    r = run_se(np.full(4, 0.2), SEKind.ml(1.0), p, tol=1e-15, max_iters=10 ** 6)
    a2t = 1.5 * (1.5 / 0.7) / (1.5 / 0.7 + 0.8 / 0.8)
    x1, x2 = rank_one_system_solve(a2t, 1.0, 0.7)
    assert np.allclose(r.q, [math.sqrt(x1), math.sqrt(x2), 0, 0], atol=1e-9)
