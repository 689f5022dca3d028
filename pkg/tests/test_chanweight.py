import math

import numpy as np
import pytest
from conftest import random_model, random_utterance
from hypothesis import given, settings, strategies as st

from chanfuse.chansel import MultichannelUtterance
from chanfuse.chanweight import (
    JACOBIAN,
    RAW_ML,
    SOFTMAX,
    DegenerateFrame,
    FrameAccumulators,
    JacobianConfig,
    WeightVector,
    _FrozenProblem,
    _logdet,
    apply_weights,
    estimate_weights_jacobian,
    estimate_weights_ml,
    frame_accumulators,
    fused_posteriors,
    jacobian_gradient,
    jacobian_objective,
    pooled_weight,
    softmax_constrain,
    solve_frame_weight,
    weighted_stats,
)
from chanfuse.errors import DataError
from chanfuse.featkit import FeatureMatrix
from chanfuse.gmm import GmmModel, log_joint, utterance_score
from chanfuse.optim import finite_diff_grad, lbfgs_minimize
from chanfuse.scenegen import SceneSpec, make_scene, sample_gmm


def dense_accumulators(model, X_t, gamma):
    A = np.zeros((X_t.shape[1], X_t.shape[1]))
    B = np.zeros(X_t.shape[1])
    for g, mu, var in zip(gamma, model.means, model.variances):
        S_inv = np.linalg.inv(np.diag(var))
        A += g * X_t.T @ S_inv @ X_t
        B += g * X_t.T @ S_inv @ mu
    return A, B


# apply_weights

def test_one_hot_is_bit_exact():
    rng = np.random.default_rng(0)
    u = random_utterance(rng, 20, 5, 4)
    for k in range(4):
        out = apply_weights(u, WeightVector(np.eye(4)[k]))
        assert np.array_equal(out.frames, u.channels[k].frames)


def test_identical_channels_any_convex_weights():
    f = FeatureMatrix(np.random.default_rng(1).normal(size=(10, 3)))
    u = MultichannelUtterance((f, f, f))
    assert np.allclose(apply_weights(u, [0.2, 0.5, 0.3]).frames, f.frames, atol=1e-15)


def test_cancellation():
    f = np.random.default_rng(2).normal(size=(10, 3))
    u = MultichannelUtterance((FeatureMatrix(f), FeatureMatrix(-f)))
    assert np.array_equal(apply_weights(u, [0.5, 0.5]).frames, np.zeros((10, 3)))


def test_apply_weights_length():
    u = random_utterance(np.random.default_rng(3), 4, 2, 3)
    with pytest.raises(DataError):
        apply_weights(u, [1.0, 0.0])


def test_weight_vector_validation():
    with pytest.raises(ValueError):
        WeightVector([np.nan, 1.0])
    with pytest.raises(ValueError):
        WeightVector([0.5, 0.6], SOFTMAX)
    with pytest.raises(ValueError):
        WeightVector([1.0, 0.0], SOFTMAX)


# accumulators and the per-frame solve

def test_scalar_reduction():
    m = GmmModel([1.0], [[0.5, -1.0, 2.0]], [[1.0, 1.0, 1.0]])
    x = np.array([1.0, 2.0, 3.0])
    acc = frame_accumulators(m, x[:, None], [1.0])
    assert acc.A.shape == (1, 1)
    assert acc.A[0, 0] == pytest.approx(x @ x, rel=1e-15)
    assert acc.B[0] == pytest.approx(x @ m.means[0], rel=1e-15)


def test_one_hot_posterior_single_component():
    rng = np.random.default_rng(4)
    m = random_model(rng, 3, 4)
    X_t = rng.normal(size=(4, 2))
    acc = frame_accumulators(m, X_t, [0.0, 1.0, 0.0])
    single = GmmModel([1.0], m.means[1:2], m.variances[1:2])
    ref = frame_accumulators(single, X_t, [1.0])
    assert np.allclose(acc.A, ref.A, rtol=1e-14) and np.allclose(acc.B, ref.B, rtol=1e-14)


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_accumulators_vs_dense(seed):
    rng = np.random.default_rng(seed)
    M, D, C = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 5)
    m = random_model(rng, M, D)
    X_t = rng.normal(size=(D, C))
    gamma = rng.dirichlet(np.ones(M))
    acc = frame_accumulators(m, X_t, gamma)
    A, B = dense_accumulators(m, X_t, gamma)
    assert np.allclose(acc.A, A, rtol=1e-10, atol=1e-12 * np.abs(A).max())
    assert np.allclose(acc.B, B, rtol=1e-10, atol=1e-12 * (np.abs(B).max() + 1e-300))
    assert np.array_equal(acc.A, acc.A.T)
    assert np.linalg.eigvalsh(acc.A).min() >= -1e-10


def test_solve_identity_and_diagonal():
    b = np.array([0.3, -2.0, 5.0])
    assert np.allclose(solve_frame_weight(FrameAccumulators(np.eye(3), b), 0.0), b)
    w = solve_frame_weight(FrameAccumulators(np.diag([2.0, 4.0]), np.array([2.0, 8.0])), 0.0)
    assert np.allclose(w, [1.0, 2.0], atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_solve_beats_grid_neighbours(seed):
    rng = np.random.default_rng(seed)
    R = rng.normal(size=(3, 3))
    A = R @ R.T + 0.1 * np.eye(3)
    B = rng.normal(size=3)
    w = solve_frame_weight(FrameAccumulators(A, B), 0.0)
    Q = lambda v: -0.5 * v @ A @ v + B @ v  # noqa: E731
    steps = np.linspace(-0.05, 0.05, 5)
    for d in np.array(np.meshgrid(steps, steps, steps)).reshape(3, -1).T:
        if np.any(d):
            assert Q(w) > Q(w + d)


def test_singular_frame_is_degenerate():
    with pytest.raises(DegenerateFrame, match="degenerate frame"):
        solve_frame_weight(FrameAccumulators(np.ones((2, 2)), np.ones(2)), 0.0)


# raw ML weights

def test_ml_single_channel_near_one():
    # per frame w_t ~ mu'P mu / (mu'P mu + D): close to 1 only when the means
    # dominate the within-component spread, otherwise the weight shrinks
    rng = np.random.default_rng(5)
    m = GmmModel(rng.dirichlet(np.ones(3)), 5.0 * rng.normal(size=(3, 4)), rng.uniform(0.2, 0.5, size=(3, 4)))
    u = MultichannelUtterance((FeatureMatrix(sample_gmm(m, 1000, rng)),))
    w = estimate_weights_ml(m, u)
    assert w.kind == RAW_ML
    assert abs(w.w[0] - 1.0) < 0.1
    shrink = random_model(rng, 3, 4, var=(0.2, 0.5))
    assert estimate_weights_ml(shrink, MultichannelUtterance((FeatureMatrix(sample_gmm(shrink, 1000, rng)),))).w[0] < 0.9


def test_ml_identical_channels_equal_weights():
    rng = np.random.default_rng(6)
    m = random_model(rng, 2, 3)
    f = FeatureMatrix(sample_gmm(m, 200, rng))
    w = estimate_weights_ml(m, MultichannelUtterance((f, f, f)))
    assert np.allclose(w.w, w.w[0], rtol=1e-6)


def test_ml_clean_channel_heavier():
    rng = np.random.default_rng(7)
    m = random_model(rng, 4, 5, var=(0.2, 0.6))
    wins = 0
    for _ in range(100):
        clean = sample_gmm(m, 200, rng)
        u = MultichannelUtterance((FeatureMatrix(clean + 3.0), FeatureMatrix(clean)))
        w = estimate_weights_ml(m, u).w
        wins += w[1] > w[0]
    assert wins >= 95


def test_ml_permutation_equivariant():
    rng = np.random.default_rng(8)
    m = random_model(rng, 3, 4)
    u = random_utterance(rng, 60, 4, 3)
    w = estimate_weights_ml(m, u).w
    perm = [2, 0, 1]
    wp = estimate_weights_ml(m, MultichannelUtterance(tuple(u.channels[p] for p in perm))).w
    assert np.allclose(wp, w[perm], rtol=1e-9, atol=1e-12)


def test_ml_all_degenerate_falls_back():
    m = GmmModel([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
    u = MultichannelUtterance((FeatureMatrix(np.zeros((5, 2))),) * 2)
    with pytest.warns(RuntimeWarning, match="fall back to uniform"):
        w = estimate_weights_ml(m, u, JacobianConfig(ridge=0.0))
    assert np.array_equal(w.w, [0.5, 0.5]) and w.warning


def test_ml_pooled_mode_is_frozen_optimum():
    rng = np.random.default_rng(9)
    m = random_model(rng, 3, 4)
    u = random_utterance(rng, 40, 4, 2)
    cfg = JacobianConfig(em_iters=1, ml_mode="pooled", ridge=0.0)
    w = estimate_weights_ml(m, u, cfg).w
    gamma = fused_posteriors(m, u, [0.5, 0.5])
    assert np.allclose(w, pooled_weight(m, u, gamma), rtol=1e-12)


# softmax

def test_softmax_examples():
    assert np.allclose(softmax_constrain([0.0, 0.0, 0.0]).w, 1 / 3, atol=1e-15)
    assert np.allclose(softmax_constrain([math.log(2), 0.0]).w, [2 / 3, 1 / 3], atol=1e-15)
    w = softmax_constrain([1000.0, 0.0])
    assert w.kind == SOFTMAX and np.all(np.isfinite(w.w))
    assert w.w[0] == 1.0 and 0 < w.w[1] < 1e-300


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_simplex_and_shift(raw, shift):
    a = softmax_constrain(raw).w
    b = softmax_constrain(np.array(raw) + shift).w
    assert np.all(a > 0) and abs(a.sum() - 1) <= 1e-9
    assert np.allclose(a, b, rtol=1e-9, atol=1e-300)


# weighted statistics and the log-det term

def test_stats_constant_features():
    u = MultichannelUtterance((FeatureMatrix(np.ones((6, 3))), FeatureMatrix(np.full((6, 3), 2.0))))
    s = weighted_stats(u, [0.3, 0.7], eps=1e-6)
    assert np.allclose(s.mean, 1.7)
    assert np.allclose(s.cov, 1e-6 * np.eye(3), rtol=0, atol=1e-18)


def test_stats_two_values():
    u = MultichannelUtterance((FeatureMatrix(np.array([[0.0], [2.0]])),))
    s = weighted_stats(u, [1.0], eps=1e-6)
    assert s.mean[0] == 1.0 and s.cov[0, 0] == pytest.approx(1 + 1e-6, rel=1e-15)


def test_stats_vs_two_pass_oracle():
    rng = np.random.default_rng(10)
    u = random_utterance(rng, 50, 4, 3)
    w = rng.normal(size=3)
    O = sum(wc * c.frames for wc, c in zip(w, u.channels))
    mu = [sum(O[t, d] for t in range(50)) / 50 for d in range(4)]
    cov = np.array([[sum((O[t, i] - mu[i]) * (O[t, j] - mu[j]) for t in range(50)) / 50 for j in range(4)]
                    for i in range(4)]) + 1e-6 * np.eye(4)
    s = weighted_stats(u, w)
    assert np.allclose(s.mean, mu, rtol=1e-10, atol=1e-13)
    assert np.allclose(s.cov, cov, rtol=1e-10, atol=1e-13)
    assert np.array_equal(s.cov, s.cov.T)


def test_stats_needs_two_frames():
    with pytest.raises(DataError):
        weighted_stats(random_utterance(np.random.default_rng(0), 1, 2, 2), [0.5, 0.5])


def test_beta_zero_is_mean_loglik():
    rng = np.random.default_rng(11)
    m = random_model(rng, 3, 4)
    u = random_utterance(rng, 30, 4, 3)
    w = rng.normal(size=3)
    assert jacobian_objective(m, u, w, JacobianConfig(beta=0.0)) == pytest.approx(
        utterance_score(m, apply_weights(u, w)), rel=1e-14)


def test_identity_covariance_logdet_zero():
    rng = np.random.default_rng(12)
    Z = rng.normal(size=(200, 3))
    Z -= Z.mean(axis=0)
    L = np.linalg.cholesky(Z.T @ Z / 200)
    Z = Z @ np.linalg.inv(L).T  # exactly white in the 1/T convention
    m = random_model(rng, 2, 3)
    u = MultichannelUtterance((FeatureMatrix(Z),))
    full = jacobian_objective(m, u, [1.0], JacobianConfig(beta=1.0, eps=1e-12))
    none = jacobian_objective(m, u, [1.0], JacobianConfig(beta=0.0))
    assert abs(full - none) < 1e-9


def test_logdet_scaling_law():
    rng = np.random.default_rng(13)
    m = random_model(rng, 2, 5)
    u = random_utterance(rng, 100, 5, 3)
    w = rng.normal(size=3)
    cfg1 = JacobianConfig(beta=1.0, eps=1e-12)
    cfg0 = JacobianConfig(beta=0.0)
    half_logdet = lambda v: jacobian_objective(m, u, v, cfg1) - jacobian_objective(m, u, v, cfg0)  # noqa: E731
    assert 2 * half_logdet(2 * w) - 2 * half_logdet(w) == pytest.approx(2 * 5 * math.log(2), abs=1e-6)


def test_factorization_failure():
    with pytest.raises(DataError, match="factorization"):
        _logdet(np.array([[1.0, 2.0], [2.0, 1.0]]))


# gradient

def test_scalar_gradient_oracle():
    mu = np.array([0.3, -1.2, 2.0, 0.5])
    m = GmmModel([1.0], [mu], [np.ones(4)])
    u = MultichannelUtterance((FeatureMatrix(np.ones((7, 4))),))
    cfg = JacobianConfig(beta=0.0)
    for w in (-1.0, 0.0, 0.7, 3.0):
        # objective is -1/2 sum_d (w - mu_d)^2 + const, gradient sum_d (mu_d - w)
        assert jacobian_gradient(m, u, [w], cfg)[0] == pytest.approx(np.sum(mu - w), abs=1e-13)


def test_identical_channels_symmetric_gradient():
    rng = np.random.default_rng(14)
    m = random_model(rng, 3, 4)
    f = FeatureMatrix(rng.normal(size=(30, 4)))
    g = jacobian_gradient(m, MultichannelUtterance((f, f, f)), [0.2, 0.3, 0.5], JacobianConfig(beta=1.0))
    assert np.allclose(g, g[0], rtol=1e-12)


def _instance(seed):
    rng = np.random.default_rng(seed)
    C, D, M = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 5)
    m = random_model(rng, M, D)
    u = random_utterance(rng, int(rng.integers(10, 40)), D, C)
    w = rng.normal(size=C) / C + 1.0 / C
    beta = float(rng.choice([0.0, 0.5, 1.0]))
    return m, u, w, JacobianConfig(beta=beta)


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)


@given(st.integers(0, 100_000))
@settings(max_examples=40, deadline=None)
def test_gradient_vs_finite_differences_frozen(seed):
    m, u, w, cfg = _instance(seed)
    gamma = fused_posteriors(m, u, w)
    g = jacobian_gradient(m, u, w, cfg, gamma)
    fd = finite_diff_grad(lambda v: jacobian_objective(m, u, v, cfg, gamma), w, 1e-6)
    assert _rel_err(g, fd) < 1e-5


@given(st.integers(0, 100_000))
@settings(max_examples=20, deadline=None)
def test_gradient_vs_finite_differences_true_objective(seed):
    m, u, w, cfg = _instance(seed)
    g = jacobian_gradient(m, u, w, cfg)
    fd = finite_diff_grad(lambda v: jacobian_objective(m, u, v, cfg), w, 1e-6)
    assert _rel_err(g, fd) < 1e-5


def test_frozen_objective_touches_true_objective():
    rng = np.random.default_rng(15)
    m = random_model(rng, 3, 4)
    u = random_utterance(rng, 30, 4, 3)
    w = rng.normal(size=3)
    gamma = fused_posteriors(m, u, w)
    cfg = JacobianConfig(beta=0.7)
    assert jacobian_objective(m, u, w, cfg, gamma) == pytest.approx(jacobian_objective(m, u, w, cfg), rel=1e-12)
    for v in rng.normal(size=(5, 3)):
        assert jacobian_objective(m, u, v, cfg, gamma) <= jacobian_objective(m, u, v, cfg) + 1e-12


def test_auxiliary_quadratic_matches_posterior_weighted_loglik():
    rng = np.random.default_rng(16)
    m = random_model(rng, 4, 5)
    u = random_utterance(rng, 1, 5, 3)
    X_t = u.stack()[0]
    gamma = rng.dirichlet(np.ones(4))
    acc = frame_accumulators(m, X_t, gamma)
    diffs = []
    for w in rng.normal(size=(5, 3)):
        quad = -0.5 * w @ acc.A @ w + acc.B @ w
        direct = gamma @ (log_joint(m, X_t @ w)[0] - np.log(m.weights))
        diffs.append(direct - quad)
    assert np.ptp(diffs) < 1e-8


def test_frozen_problem_matches_objective():
    rng = np.random.default_rng(17)
    m = random_model(rng, 3, 4)
    u = random_utterance(rng, 25, 4, 2)
    gamma = fused_posteriors(m, u, [0.5, 0.5])
    cfg = JacobianConfig(beta=1.0)
    prob = _FrozenProblem(m, u.stack(), gamma, cfg)
    for w in rng.normal(size=(4, 2)):
        assert prob.value(w) == pytest.approx(jacobian_objective(m, u, w, cfg, gamma), rel=1e-10)
        assert np.allclose(prob.grad(w), jacobian_gradient(m, u, w, cfg, gamma), rtol=1e-10, atol=1e-12)


# Jacobian-constrained estimation

@pytest.mark.parametrize("seed", range(5))
def test_lbfgs_recovers_pooled_solution(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 3, 6)
    u = random_utterance(rng, 80, 6, 3)
    gamma = fused_posteriors(m, u, np.full(3, 1 / 3))
    cfg = JacobianConfig(beta=0.0)
    prob = _FrozenProblem(m, u.stack(), gamma, cfg)
    res = lbfgs_minimize(lambda v: -prob.value(v), lambda v: -prob.grad(v), np.full(3, 1 / 3))
    assert np.allclose(res.x, pooled_weight(m, u, gamma), atol=1e-4)


def test_identical_channels_equal_jacobian_weights():
    rng = np.random.default_rng(18)
    m = random_model(rng, 3, 4)
    f = FeatureMatrix(rng.normal(size=(60, 4)))
    w = estimate_weights_jacobian(m, MultichannelUtterance((f, f, f)))
    assert w.kind == JACOBIAN
    assert np.allclose(w.w, w.w[0], atol=1e-6)


def _scene(seed, ref, gmm):
    rng = np.random.default_rng(seed)
    clean = FeatureMatrix(sample_gmm(ref, 300, rng, 0.8))
    sig = rng.uniform(0.3, 1.5, size=4)
    spec = SceneSpec(4, tuple(rng.uniform(0.5, 2, 4)), tuple(sig), seed=seed)
    return make_scene(clean, spec)[0].normalized()


@pytest.mark.parametrize("seed", range(5))
def test_outer_loop_monotone(seed, small_ref, small_clean_gmm):
    u = _scene(seed, small_ref, small_clean_gmm)
    trace = []
    estimate_weights_jacobian(small_clean_gmm, u, JacobianConfig(em_iters=5), trace=trace)
    assert len(trace) == 6
    assert np.all(np.diff(trace) >= -1e-6)


def test_beta_one_keeps_more_variance(small_ref, small_clean_gmm):
    wins = 0
    for seed in range(20):
        u = _scene(100 + seed, small_ref, small_clean_gmm)
        w1 = estimate_weights_jacobian(small_clean_gmm, u, JacobianConfig(beta=1.0))
        w0 = estimate_weights_jacobian(small_clean_gmm, u, JacobianConfig(beta=0.0))
        wins += np.trace(weighted_stats(u, w1).cov) >= np.trace(weighted_stats(u, w0).cov)
    assert wins >= 18


def test_jacobian_short_utterance_falls_back():
    rng = np.random.default_rng(19)
    with pytest.warns(RuntimeWarning):
        w = estimate_weights_jacobian(random_model(rng, 2, 3), random_utterance(rng, 1, 3, 2))
    assert np.array_equal(w.w, [0.5, 0.5]) and w.warning


def test_config_validation():
    with pytest.raises(ValueError):
        JacobianConfig(beta=-1.0)
    with pytest.raises(ValueError):
        JacobianConfig(eps=0.0)
    with pytest.raises(ValueError):
        JacobianConfig(ml_mode="median")
    u = random_utterance(np.random.default_rng(0), 5, 3, 2)
    with pytest.raises(DataError):
        estimate_weights_ml(random_model(np.random.default_rng(0), 2, 3), u, JacobianConfig(init_weights=(1.0,)))
