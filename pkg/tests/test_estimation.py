import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import (
    EXPERT_MATRIX, fd_gradient, random_gradcheck_instance, random_measure, relative_error,
)
from sigmoe.estimation import (
    Dataset, FitConfig, FitError, SynthesisConfig, fit, init_perturbed, lse_gradient,
    lse_objective, synthesize_dataset,
)
from sigmoe.model import ContractError, ExpertSpec, MixingMeasure
from sigmoe.streams import generator
from sigmoe.voronoi import CellKind, assign_cells


@pytest.fixture
def truth2():
    rng = np.random.default_rng(21)
    return random_measure(rng, 2, 2, ExpertSpec.linear(2), scale=0.7)


# -- synthesis ----------------------------------------------------------------

def test_noiseless_synthesis_is_exact(truth2):
    data = synthesize_dataset(SynthesisConfig(2, 200, truth2, 0.0, seed=3))
    np.testing.assert_array_equal(data.Y, truth2(data.X))
    assert np.all(np.abs(data.X) <= 1.0)


def test_noise_variance_band():
    rng = np.random.default_rng(22)
    truth = random_measure(rng, 8, 8, ExpertSpec.two_layer(8, "relu"), scale=8 ** -0.5)
    data = synthesize_dataset(SynthesisConfig(8, 100_000, truth, 0.01, seed=5))
    resid = data.Y - truth(data.X)
    assert 0.0094 <= resid.var(ddof=1) <= 0.0106


def test_synthesis_is_deterministic(truth2):
    cfg = SynthesisConfig(2, 50, truth2, 0.01, seed=11)
    a, b = synthesize_dataset(cfg), synthesize_dataset(cfg)
    assert a.X.tobytes() == b.X.tobytes() and a.Y.tobytes() == b.Y.tobytes()
    c = synthesize_dataset(SynthesisConfig(2, 50, truth2, 0.01, seed=12))
    assert not np.array_equal(a.X, c.X)


def test_synthesis_config_contract(truth2):
    with pytest.raises(ContractError):
        SynthesisConfig(2, 10, truth2, -0.1)
    with pytest.raises(ContractError):
        SynthesisConfig(3, 10, truth2)
    cfg = SynthesisConfig(2, 10, truth2, 0.02, seed=-4)
    back = SynthesisConfig.from_dict(cfg.to_dict())
    assert back.ground_truth.equals(truth2) and back.seed == -4


# -- objective ----------------------------------------------------------------

def test_objective_zero_at_truth(truth2):
    data = synthesize_dataset(SynthesisConfig(2, 500, truth2, 0.0, seed=1))
    assert lse_objective(truth2, data) <= 1e-18 * data.n


def test_objective_single_datum():
    G = MixingMeasure(np.zeros((1, 1, 1)), np.zeros((1, 1)), [0.0], [[0.0, 1.0]], ExpertSpec.linear(1))
    assert lse_objective(G, Dataset([[0.3]], [2.0])) == 2.25


def test_objective_matches_per_point_sum():
    rng = np.random.default_rng(23)
    G = random_measure(rng, 3, 3, ExpertSpec.two_layer(3, "gelu"))
    X, Y = rng.uniform(-1, 1, size=(100, 3)), rng.normal(size=100)
    expected = sum((Y[i] - G(X[i:i + 1])[0]) ** 2 for i in range(100))
    assert abs(lse_objective(G, Dataset(X, Y)) - expected) <= 1e-10 * expected


# -- gradient -----------------------------------------------------------------

def test_gradient_vanishes_at_truth(truth2):
    data = synthesize_dataset(SynthesisConfig(2, 300, truth2, 0.0, seed=2))
    assert np.linalg.norm(lse_gradient(truth2, data)) <= 1e-8 * data.n


def test_gradient_hand_chain_rule():
    # one linear expert, one datum x=(1,0): s = x'Ax + b'x + c, f = sig(s)(alpha'x + beta)
    A = np.array([[0.3, -0.2], [0.1, 0.4]])
    b, c = np.array([0.5, -1.0]), 0.2
    alpha, beta, y = np.array([1.0, 2.0]), 0.5, 1.0
    G = MixingMeasure([A], [b], [c], [np.r_[alpha, beta]], ExpertSpec.linear(2))
    s = 0.3 + 0.5 + 0.2
    sig = 1 / (1 + math.exp(-s))
    E = 1.0 + 0.5
    r = y - sig * E
    ds = -2 * r * sig * (1 - sig) * E  # d obj / d s
    de = -2 * r * sig  # d obj / d E
    expected = [ds, 0, 0, 0, ds, 0, ds, de, 0, de]
    got = lse_gradient(G, Dataset([[1.0, 0.0]], [y]))
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("gating", ["sigmoid", "softmax"])
@pytest.mark.parametrize("score", ["full", "partial"])
@pytest.mark.parametrize("expert", sorted(EXPERT_MATRIX))
def test_gradient_matches_finite_differences(gating, score, expert):
    rng = generator(7, "misc", len(gating), len(score), sorted(EXPERT_MATRIX).index(expert))
    for _ in range(8):
        G, data = random_gradcheck_instance(rng, expert, gating, score)
        assert relative_error(lse_gradient(G, data), fd_gradient(G, data)) <= 1e-4


# -- initialisation ---------------------------------------------------------------

def test_init_zero_scale_exact_is_truth(truth2):
    G = init_perturbed(truth2, 2, 0.0, np.random.default_rng(0))
    assert G.equals(truth2)


def test_init_duplicate_forms_one_shared_cell(truth2):
    G = init_perturbed(truth2, 3, 0.0, np.random.default_rng(0))
    cls = assign_cells(G, truth2).classification
    assert sorted(k.value for k in cls) == ["exact", "over"]
    assert max(len(c) for c in assign_cells(G, truth2).cells) == 2


def test_init_pool_restricts_duplicates(truth2):
    for seed in range(10):
        G = init_perturbed(truth2, 4, 0.0, np.random.default_rng(seed), pool=[1])
        assert len(assign_cells(G, truth2).cells[1]) == 3


def test_init_perturbation_tail():
    rng0 = np.random.default_rng(24)
    truth = random_measure(rng0, 4, 3, ExpertSpec.linear(3))
    src = truth.flatten().reshape(4, -1)
    for seed in range(200):
        G = init_perturbed(truth, 5, 0.05, generator(seed, "init"))
        theta = G.flatten().reshape(5, -1)
        assert np.max(np.abs(theta[:4] - src)) <= 5 * 0.05
        assert np.min(np.max(np.abs(theta[4] - src), axis=1)) <= 5 * 0.05
    a = init_perturbed(truth, 5, 0.05, generator(1, "init"))
    assert a.equals(init_perturbed(truth, 5, 0.05, generator(1, "init")))


def test_init_rejects_too_few_atoms(truth2):
    with pytest.raises(ContractError):
        init_perturbed(truth2, 1, 0.0, np.random.default_rng(0))


def test_init_clamps_to_box():
    truth = MixingMeasure(np.zeros((1, 1, 1)), [[0.0]], [20.0], [[0.0, 1.0]], ExpertSpec.linear(1))
    from sigmoe.estimation import ParamBounds
    G = init_perturbed(truth, 2, 0.0, np.random.default_rng(0), ParamBounds(10.0))
    assert np.all(G.c == 10.0)


# -- fitting ------------------------------------------------------------------

def test_fit_requires_overspecification(truth2):
    data = synthesize_dataset(SynthesisConfig(2, 50, truth2, 0.0))
    with pytest.raises(ContractError):
        fit(data, FitConfig(n_fit_experts=2))
    with pytest.raises(ContractError):
        fit(data, FitConfig(n_fit_experts=1, allow_exact=True))


def test_fit_starting_at_optimum(truth2):
    data = synthesize_dataset(SynthesisConfig(2, 400, truth2, 0.0, seed=4))
    res = fit(data, FitConfig(n_fit_experts=2, allow_exact=True, init_perturb_scale=0.0, restarts=1))
    assert res.final_objective <= 1e-12 * data.n
    assert res.iterations == 0
    assert res.estimate.equals(truth2)


def test_fit_reaches_noise_floor(truth2):
    data = synthesize_dataset(SynthesisConfig(2, 10_000, truth2, 0.01, seed=9))
    res = fit(data, FitConfig(restarts=2, seed=3))
    assert res.estimate.n_atoms == 3
    assert res.final_objective / data.n <= 2 * 0.01
    for entry in res.restart_log:
        assert entry["final_objective"] <= entry["initial_objective"]
    assert res.final_objective == min(e["final_objective"] for e in res.restart_log)


def test_fit_is_deterministic(truth2):
    data = synthesize_dataset(SynthesisConfig(2, 300, truth2, 0.01, seed=6))
    cfg = FitConfig(restarts=2, max_iters=200, polish_iters=100, seed=8)
    a, b = fit(data, cfg), fit(data, cfg)
    assert a.estimate.flatten().tobytes() == b.estimate.flatten().tobytes()
    assert a.to_dict() == b.to_dict()


def test_fit_respects_box():
    rng = np.random.default_rng(25)
    truth = random_measure(rng, 2, 2, ExpertSpec.linear(2))
    data = Dataset(rng.uniform(-1, 1, size=(100, 2)), 50 * rng.normal(size=100))
    res = fit(data, FitConfig(restarts=1, box_radius=1.5, max_iters=300, polish_iters=200), truth=truth)
    assert np.max(np.abs(res.estimate.flatten())) <= 1.5


def test_failed_restarts_are_logged_and_all_failing_raises(truth2, monkeypatch):
    import sigmoe.estimation as est
    data = synthesize_dataset(SynthesisConfig(2, 50, truth2, 0.0))
    calls = {"n": 0}
    real = est._optimise

    def flaky(G0, data, cfg):
        calls["n"] += 1
        if calls["n"] == 1:
            raise FloatingPointError("boom")
        return real(G0, data, cfg)

    monkeypatch.setattr(est, "_optimise", flaky)
    res = fit(data, FitConfig(restarts=2, max_iters=20, polish_iters=10))
    assert res.restart_index == 1 and "failed" in res.restart_log[0]

    def broken(G0, data, cfg):
        raise FloatingPointError("boom")

    monkeypatch.setattr(est, "_optimise", broken)
    with pytest.raises(FitError):
        fit(data, FitConfig(restarts=2))


def test_fit_config_round_trip():
    cfg = FitConfig(restarts=3, duplicate_atoms=[6, 7], gating="softmax")
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ContractError):
        FitConfig(restarts=0)
    with pytest.raises(ValueError):
        FitConfig(gating="tanh")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), gating=st.sampled_from(["sigmoid", "softmax"]))
def test_objective_nonnegative_and_gradient_shape(seed, gating):
    rng = np.random.default_rng(seed)
    G = random_measure(rng, 2, 2, ExpertSpec.polynomial(2, 2), gating)
    data = Dataset(rng.uniform(-1, 1, size=(10, 2)), rng.normal(size=10))
    assert lse_objective(G, data) >= 0
    assert lse_gradient(G, data).shape == G.flatten().shape
