import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.special import ndtri

from spikedmt import _noise
from spikedmt.errors import CapacityError, ConfigurationError, DimensionError
from spikedmt.model import (Dimensions, DenseTensor, EstimateSet, ModelParams, PlantedSignals,
                            VirtualTensor, contract_tensor, generate_observations,
                            make_instance, memory_budget, overlaps_and_mse, sample_planted)

P = ModelParams(0.7, 0.3, 1.5, 0.8, 1.0)


def naive_contract(T, a, b, mode):
    n1, n3, n4 = T.shape
    if mode == 1:
        out = np.zeros(n1)
        for i in range(n1):
            out[i] = math.fsum(T[i, j, k] * a[j] * b[k] for j in range(n3) for k in range(n4))
    elif mode == 3:
        out = np.zeros(n3)
        for j in range(n3):
            out[j] = math.fsum(T[i, j, k] * a[i] * b[k] for i in range(n1) for k in range(n4))
    else:
        out = np.zeros(n4)
        for k in range(n4):
            out[k] = math.fsum(T[i, j, k] * a[i] * b[j] for i in range(n1) for j in range(n3))
    return out


def test_params_validation():
    with pytest.raises(ConfigurationError):
        ModelParams(-1, 0.3, 1.5, 0.8, 1)
    with pytest.raises(ConfigurationError):
        ModelParams(0.0, 0.3, 1.5, 0.8, 1)
    with pytest.raises(ConfigurationError):
        ModelParams(0.7, 0.3, 1.5, 0.8, 1, rho=math.inf)
    with pytest.raises(ConfigurationError):
        ModelParams(0.7, 0.3, 0.0, 0.8, 1)
    ModelParams(0.0, 0.0, 1.5, 0.8, 1, test_mode=True)


def test_dimensions_round_and_ratios():
    d = Dimensions.from_params(P, 1000)
    assert d.sizes == (1000, 1500, 800, 1000)
    assert d.ratios == (1.5, 0.8, 1.0)
    assert Dimensions.from_params(ModelParams(1, 1, 1.25, 1.0, 1), 2).n2 == 3  # 2.5 rounds up
    with pytest.raises(ConfigurationError):
        Dimensions.from_params(ModelParams(1, 1, 0.1, 1, 1), 4)
    with pytest.raises(ConfigurationError):
        Dimensions.from_params(P, 1)


def test_sample_planted_norms_and_determinism():
    s = sample_planted(ModelParams(1, 1, 1.0, 1.0, 1.0), 4, 3)
    assert len(s.v) == 4 and abs(np.linalg.norm(s.v) - 2.0) < 1e-14
    a = sample_planted(P, 1000, 5)
    b = sample_planted(P, 1000, 5)
    for x, y in zip(a.as_tuple(), b.as_tuple()):
        assert np.array_equal(x, y)
    assert len(a.v) == 1500
    for w in a.as_tuple():
        assert abs(w @ w / len(w) - 1) < 1e-12


def test_zero_noise_observations():
    p = ModelParams(0.0, 0.0, 1.0, 1.0, 1.0, test_mode=True)
    s = sample_planted(p, 6, 0)
    ym, T = generate_observations(s, p, 0, "dense64")
    assert np.allclose(ym, np.outer(s.u, s.v) / math.sqrt(6), atol=1e-14)
    full = np.einsum("i,j,k->ijk", s.u, s.x, s.y) / 6
    assert np.allclose(T.to_array(), full, atol=1e-14)
    got = contract_tensor(T, s.x, s.y, 1)
    assert np.allclose(got, s.u * (s.x @ s.x) * (s.y @ s.y) / 6, atol=1e-12)
    assert np.allclose(got, s.u * 6 * 6 / 6, atol=1e-12)


def test_capacity_error_default_budget():
    p = ModelParams(0.7, 0.3, 1.5, 0.8, 1.0)
    s = PlantedSignals(np.ones(1000), np.ones(1500), np.ones(800), np.ones(1000))
    with pytest.raises(CapacityError) as err:
        generate_observations(s, p, 0, "dense64", budget=4 * 1024 ** 3)
    assert err.value.requested == 6_400_000_000
    assert err.value.record()["suggestion"] == "virtual"


def test_memory_budget_env(monkeypatch):
    monkeypatch.setenv("SPIKEDMT_MEMORY_BUDGET", "2GiB")
    assert memory_budget() == 2 * 1024 ** 3
    monkeypatch.setenv("SPIKEDMT_MEMORY_BUDGET", "1000")
    assert memory_budget() == 1000
    with pytest.raises(CapacityError):
        make_instance(P, 20, 0, "dense64")


def test_basis_tensor_contraction():
    T = np.zeros((3, 3, 3))
    T[0, 0, 0] = 1
    e1 = np.array([1.0, 0, 0])
    assert np.array_equal(contract_tensor(DenseTensor(T), e1, e1, 1), e1)


def test_contraction_vs_triple_loop():
    rng = np.random.default_rng(1)
    T = rng.standard_normal((20, 15, 10))
    a1, a3, a4 = rng.standard_normal(20), rng.standard_normal(15), rng.standard_normal(10)
    D = DenseTensor(T)
    assert np.max(np.abs(contract_tensor(D, a3, a4, 1) - naive_contract(T, a3, a4, 1))) < 1e-12
    assert np.max(np.abs(contract_tensor(D, a1, a4, 3) - naive_contract(T, a1, a4, 3))) < 1e-12
    assert np.max(np.abs(contract_tensor(D, a1, a3, 4) - naive_contract(T, a1, a3, 4))) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 20), st.integers(2, 20), st.integers(2, 20), st.integers(0, 2 ** 32))
def test_virtual_contraction_matches_oracle(n1, n3, n4, seed):
    rng = np.random.default_rng(seed)
    u, x, y = rng.standard_normal(n1), rng.standard_normal(n3), rng.standard_normal(n4)
    V = VirtualTensor(seed, u, x, y, 0.3)
    T = V.to_array()
    a1, a3, a4 = rng.standard_normal(n1), rng.standard_normal(n3), rng.standard_normal(n4)
    for mode, (a, b) in {1: (a3, a4), 3: (a1, a4), 4: (a1, a3)}.items():
        want = naive_contract(T, a, b, mode)
        scale = max(1.0, np.max(np.abs(want)))
        assert np.max(np.abs(contract_tensor(V, a, b, mode) - want)) < 1e-12 * scale
    Mref = np.einsum("ijk,i->jk", T, a1)
    assert np.allclose(V.contract_mode1(a1), Mref, rtol=0, atol=1e-12)


def test_dense_virtual_equivalence():
    p = ModelParams(0.7, 0.3, 1.0, 1.0, 1.0)
    iv = make_instance(p, 50, 9, "virtual")
    i64 = make_instance(p, 50, 9, "dense64")
    i32 = make_instance(p, 50, 9, "dense32")
    assert np.array_equal(iv.y_m, i64.y_m)
    rng = np.random.default_rng(0)
    U, X, W = (rng.standard_normal((3, 50)) for _ in range(3))
    rv = iv.tensor.contract_all(U, X, W)
    for inst, tol in ((i64, 1e-10), (i32, 1e-5)):
        for a, b in zip(rv, inst.tensor.contract_all(U, X, W)):
            assert np.max(np.abs(a - b)) <= tol * np.max(np.abs(a))


def test_dimension_mismatch():
    V = VirtualTensor(0, np.ones(4), np.ones(3), np.ones(2), 1.0)
    with pytest.raises(DimensionError):
        contract_tensor(V, np.ones(4), np.ones(2), 1)
    with pytest.raises(DimensionError):
        contract_tensor(V, np.ones(3), np.ones(2), 2)


def test_noise_generator_distribution():
    z = _noise.normals(2024, 0, 1_000_000)
    assert abs(z.mean()) < 5e-3
    assert abs(z.var() - 1) < 5e-3
    assert stats.kstest(z, "norm").pvalue > 1e-3
    assert abs(np.corrcoef(z[:-1], z[1:])[0, 1]) < 5e-3
    # offsets address the same stream
    assert np.array_equal(_noise.normals(2024, 333, 50), z[333:383])


def test_inverse_cdf_matches_reference():
    p = np.concatenate([np.linspace(0, 1, 2001)[1:-1], 10.0 ** -np.arange(1, 300, 7)])
    ours = np.array([_noise.normal_ppf(v) for v in p])
    assert np.max(np.abs(ours - ndtri(p)) / np.maximum(1, np.abs(ndtri(p)))) < 1e-14


def test_instances_are_deterministic():
    a = make_instance(P, 30, 4, "virtual")
    b = make_instance(P, 30, 4, "dense64")
    c = make_instance(P, 30, 5, "virtual")
    assert np.array_equal(a.tensor.to_array(), b.tensor.to_array())
    assert not np.array_equal(a.tensor.to_array(), c.tensor.to_array())


def test_thread_count_bitwise_identical():
    code = (
        "import numpy as np, hashlib\n"
        "from spikedmt.model import ModelParams, make_instance\n"
        "i = make_instance(ModelParams(0.7, 0.3, 1.5, 0.8, 1.0), 40, 3, 'virtual')\n"
        "r = np.random.default_rng(0)\n"
        "U, X, W = r.standard_normal((2, 40)), r.standard_normal((2, 32)), r.standard_normal((2, 40))\n"
        "h = hashlib.sha256()\n"
        "for a in i.tensor.contract_all(U, X, W): h.update(a.tobytes())\n"
        "h.update(i.tensor.contract_mode1(U[0]).tobytes())\n"
        "print(h.hexdigest())\n")
    outs = []
    for threads in ("1", "4"):
        env = dict(os.environ, NUMBA_NUM_THREADS="4", SPIKEDMT_THREADS=threads)
        outs.append(subprocess.run([sys.executable, "-c", code], env=env, check=True,
                                   capture_output=True, text=True).stdout)
    assert outs[0] == outs[1]


def test_metrics_identities():
    s = sample_planted(P, 200, 1)
    m = overlaps_and_mse(EstimateSet(s.as_tuple(), "spherical"), s)
    assert np.allclose(m.overlaps, 1) and np.allclose(m.mse_per_coord, 0, atol=1e-12)
    neg = EstimateSet(tuple(-w for w in s.as_tuple()), "spherical")
    m = overlaps_and_mse(neg, s)
    assert np.allclose(m.overlaps, 1) and np.allclose(m.mse_per_coord, 0, atol=1e-12)
    assert np.allclose(m.signed_overlaps, -1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_spherical_mse_identity(seed):
    s = sample_planted(P, 50, seed)
    rng = np.random.default_rng(seed)
    est = EstimateSet.spherical([w + rng.normal(0, 2, len(w)) * rng.choice([-1, 1])
                                 for w in s.as_tuple()])
    m = overlaps_and_mse(est, s)
    assert np.allclose(m.mse_per_coord + 2 * m.overlaps, 2, atol=1e-10)


def test_orthogonal_random_estimates_have_small_overlap():
    n = 10_000
    p = ModelParams(1, 1, 1, 1, 1)
    qs = []
    for seed in range(100):
        s = sample_planted(p, n, seed)
        rng = np.random.default_rng(10_000 + seed)
        est = EstimateSet.spherical([rng.standard_normal(n) for _ in range(4)])
        qs.append(overlaps_and_mse(est, s).overlaps)
    assert np.mean(qs) < 3 / math.sqrt(n)


def test_spherical_estimate_validation():
    with pytest.raises(ConfigurationError):
        EstimateSet((np.ones(3), np.ones(3), np.ones(3), 2 * np.ones(3)), "spherical")
    with pytest.raises(DimensionError):
        EstimateSet((np.ones(3),) * 3)
