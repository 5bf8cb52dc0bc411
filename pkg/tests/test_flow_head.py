import numpy as np
import pytest

from flame import autodiff as ad
from flame.flow_head import (
    CouplingLayer,
    FlowHead,
    build_mask,
    coupling_forward,
    coupling_inverse,
    forecast,
    log_prob,
    sample,
    strict_mask,
)
from flame.tokenizer import instance_normalize
from _oracles import gradcheck

LOG_2PI = np.log(2 * np.pi)


def randomize(module, rng, scale=0.3):
    """Give the zero-initialised output layers random weights."""
    for layer in module.layers if isinstance(module, FlowHead) else [module]:
        layer.w2.data[:] = rng.normal(0.0, scale, layer.w2.shape)
        layer.b2.data[:] = rng.normal(0.0, scale, layer.b2.shape)
    return module


def random_head(seed, p, d, K=3, hidden=16, alternate=False, scale=0.3):
    rng = np.random.default_rng(seed)
    return randomize(FlowHead(rng, p, d, K, hidden, alternate_order=alternate), rng, scale)


def fd_jacobian(fn, z, h=1e-6):
    J = np.empty((z.size, z.size))
    for k in range(z.size):
        e = np.zeros_like(z)
        e[k] = h
        J[:, k] = (fn(z + e) - fn(z - e)) / (2 * h)
    return J


# -- masks ---------------------------------------------------------------------------


def test_mask_examples():
    M = build_mask(4, 3)
    assert M.shape == (7, 7)
    assert M[2 - 1, 4 - 1] == 0
    assert M[4 - 1, 2 - 1] == 1
    assert M[6 - 1, 3 - 1] == 1


@pytest.mark.parametrize("p,d", [(1, 1), (3, 2), (8, 5)])
def test_mask_rule(p, d):
    M = build_mask(p, d)
    for n in range(1, p + d + 1):
        for k in range(1, p + d + 1):
            assert M[n - 1, k - 1] == (0 if n < k <= p else 1)
    assert np.all(M[p:] == 1) and np.all(np.diag(M)[:p] == 1)


def test_mask_rejects_bad_dims():
    with pytest.raises(ValueError):
        build_mask(0, 3)


@pytest.mark.parametrize("p,d,hidden", [(1, 2, 4), (4, 3, 9), (6, 2, 32)])
def test_connectivity_respects_strict_mask(p, d, hidden):
    layer = CouplingLayer(np.random.default_rng(0), p, d, hidden)
    strict = strict_mask(p, d)
    conn = layer.connectivity()
    assert np.all(conn <= strict)  # never more than allowed
    np.testing.assert_array_equal(np.diag(conn[:p]), 0)
    if hidden >= p:
        np.testing.assert_array_equal(conn, strict)  # and with enough units, exactly the allowed set


def test_conditioner_jacobian_exact_zero():
    p, d = 5, 3
    layer = randomize(CouplingLayer(np.random.default_rng(1), p, d, 20), np.random.default_rng(2), 1.0)
    x0 = np.random.default_rng(3).standard_normal(p)
    o = np.random.default_rng(4).standard_normal(d)
    allowed = strict_mask(p, d)[:p]
    for i in range(p):
        e = np.zeros(p)
        e[i] = 1e-3
        s1, t1 = layer.conditioner(x0 + e, o)
        s0, t0 = layer.conditioner(x0 - e, o)
        for j in range(p):
            if not allowed[i, j]:
                assert s1.data[j] == s0.data[j] and t1.data[j] == t0.data[j]


# -- coupling layer -------------------------------------------------------------------


def test_identity_init():
    layer = CouplingLayer(np.random.default_rng(0), 4, 3, 8)
    z = np.random.default_rng(1).standard_normal((5, 4))
    o = np.random.default_rng(2).standard_normal((5, 3))
    x, logdet = coupling_forward(layer, z, o)
    np.testing.assert_array_equal(x, z)
    np.testing.assert_array_equal(logdet, 0.0)
    zi, ld = coupling_inverse(layer, z, o)
    np.testing.assert_array_equal(zi, z)


def _scale_by_two(p, d):
    layer = CouplingLayer(np.random.default_rng(0), p, d, 8)
    # constant s_hat whose clamped value is exactly log 2
    layer.b2.data[:p] = layer.s_max * np.arctanh(np.log(2) / layer.s_max)
    return layer


def test_scale_by_two_forward():
    layer = _scale_by_two(3, 2)
    z = np.random.default_rng(1).standard_normal(3)
    x, logdet = coupling_forward(layer, z, np.zeros(2))
    np.testing.assert_allclose(x, 2 * z, rtol=1e-14)
    assert logdet == pytest.approx(3 * np.log(2), rel=1e-14)


def test_scale_by_two_log_prob():
    p = 3
    layer = _scale_by_two(p, 2)
    head = FlowHead(np.random.default_rng(0), p, 2, 1, 8)
    head.layers = [layer]
    x = np.random.default_rng(5).standard_normal(p)
    expected = np.sum(-0.5 * (x / 2) ** 2 - 0.5 * LOG_2PI) - p * np.log(2)
    assert log_prob(head, x, np.zeros(2)) == pytest.approx(expected, rel=1e-13)


def test_scale_clamped():
    layer = CouplingLayer(np.random.default_rng(0), 3, 2, 8, s_max=5.0)
    layer.b2.data[:3] = 1e6
    s, _ = layer.conditioner(np.zeros(3), np.zeros(2))
    assert np.all(np.abs(s.data) <= 5.0)


def test_round_trip_100_random_layers():
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        p, d = int(rng.integers(1, 17)), int(rng.integers(1, 33))
        layer = randomize(CouplingLayer(rng, p, d, int(rng.integers(p, 3 * p + 2))), rng, 0.5)
        z = rng.standard_normal((4, p))
        o = rng.standard_normal((4, d))
        x, fwd_ld = coupling_forward(layer, z, o)
        zi, inv_ld = coupling_inverse(layer, x, o)
        worst = max(worst, np.abs(zi - z).max())
        np.testing.assert_allclose(inv_ld, -fwd_ld, rtol=0, atol=1e-12)
    assert worst < 1e-9


@pytest.mark.parametrize("alternate", [False, True])
def test_head_round_trip(alternate):
    head = random_head(1, 6, 4, K=4, alternate=alternate)
    z = np.random.default_rng(2).standard_normal((10, 6))
    o = np.random.default_rng(3).standard_normal((10, 4))
    x, ld = head.forward(z, o)
    zi, ild = head.inverse(x, o)
    assert np.abs(zi.data - z).max() < 1e-9
    np.testing.assert_allclose(ild.data, -ld, atol=1e-12)


@pytest.mark.parametrize("alternate", [False, True])
@pytest.mark.parametrize("seed", range(5))
def test_logdet_matches_fd_jacobian(seed, alternate):
    p, d = 5, 3
    head = random_head(seed, p, d, K=3, alternate=alternate, scale=0.5)
    o = np.random.default_rng(seed + 10).standard_normal(d)
    z = np.random.default_rng(seed + 20).standard_normal(p)
    J = fd_jacobian(lambda v: head.forward(v, o)[0], z)
    _, logdet = head.forward(z, o)
    assert abs(np.linalg.slogdet(J)[1] - logdet) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_forward_jacobian_triangular_exact(seed):
    p, d = 6, 2
    layer = randomize(CouplingLayer(np.random.default_rng(seed), p, d, 18), np.random.default_rng(seed + 1), 1.0)
    o = np.random.default_rng(seed + 2).standard_normal(d)
    z = np.random.default_rng(seed + 3).standard_normal(p)
    J = fd_jacobian(lambda v: coupling_forward(layer, v, o)[0], z, h=1e-3)
    assert np.all(np.triu(J, 1) == 0.0)
    assert np.all(np.diag(J) != 0.0)


def test_reversed_order_jacobian_upper_triangular():
    p = 5
    layer = randomize(CouplingLayer(np.random.default_rng(0), p, 2, 15, order=np.arange(p)[::-1]),
                      np.random.default_rng(1), 1.0)
    o = np.ones(2)
    J = fd_jacobian(lambda v: coupling_forward(layer, v, o)[0], np.random.default_rng(2).standard_normal(p), 1e-3)
    assert np.all(np.tril(J, -1) == 0.0)


# -- densities ---------------------------------------------------------------------------


def test_log_prob_origin_identity():
    head = FlowHead(np.random.default_rng(0), 4, 3, 3, 8)
    assert log_prob(head, np.zeros(4), np.ones(3)) == pytest.approx(-3.67575413, abs=1e-8)
    assert log_prob(head, np.zeros(4), np.ones(3)) == pytest.approx(-2 * LOG_2PI, rel=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_p1_density_integrates_to_one(seed):
    head = random_head(seed, 1, 3, K=3, scale=0.5)
    o = np.random.default_rng(seed + 5).standard_normal(3)
    grid = np.linspace(-60, 60, 200_001)
    lp = head.log_prob(grid[:, None], np.broadcast_to(o, (grid.size, 3))).data
    total = np.trapezoid(np.exp(lp), grid) if hasattr(np, "trapezoid") else np.trapz(np.exp(lp), grid)
    assert abs(total - 1.0) < 1e-3


def test_p2_density_monte_carlo():
    head = random_head(7, 2, 3, K=3, scale=0.5)
    o = np.random.default_rng(8).standard_normal(3)
    rng = np.random.default_rng(9)
    # importance sampling from a Gaussian fitted to flow samples, widened
    draws = head.sample(o, 20_000, rng)
    mu, cov = draws.mean(0), 2.0 * np.cov(draws.T)
    n = 200_000
    L = np.linalg.cholesky(cov)
    q = mu + rng.standard_normal((n, 2)) @ L.T
    diff = np.linalg.solve(L, (q - mu).T)
    log_q = -0.5 * (diff**2).sum(0) - np.log(np.diag(L)).sum() - LOG_2PI
    lp = head.log_prob(q, np.broadcast_to(o, (n, 3))).data
    est = np.mean(np.exp(lp - log_q))
    assert abs(est - 1.0) < 0.02


# -- sampling ---------------------------------------------------------------------------


def test_identity_head_samples_standard_normal():
    head = FlowHead(np.random.default_rng(0), 4, 3, 3, 8)
    s = sample(head, np.ones(3), 10_000, np.random.default_rng(1))
    assert s.shape == (10_000, 4)
    assert np.all(np.abs(s.mean(0)) < 0.05)
    assert np.all(np.abs(s.var(0) - 1) < 0.1)


def test_sampling_seeded():
    head = random_head(0, 3, 2)
    a = head.sample(np.ones(2), 50, np.random.default_rng(4))
    b = head.sample(np.ones(2), 50, np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_zero_samples_empty():
    head = random_head(0, 3, 2)
    out = head.sample(np.ones((5, 2)), 0, np.random.default_rng(0))
    assert out.shape == (0, 5, 3) and out.size == 0


def test_conditioning_changes_distribution():
    head = random_head(3, 2, 4, K=2, scale=1.0)
    rng = np.random.default_rng(0)
    a = head.sample(np.full(4, 1.0), 10_000, rng)
    b = head.sample(np.full(4, -1.0), 10_000, rng)
    se = np.sqrt(a.var(0) / 1e4 + b.var(0) / 1e4)
    assert np.any(np.abs(a.mean(0) - b.mean(0)) > 6 * se)


def test_head_gradcheck():
    head = random_head(0, 3, 2, K=2, hidden=6)
    x = np.random.default_rng(1).standard_normal((4, 3))
    o = ad.parameter(np.random.default_rng(2).standard_normal((4, 2)))
    assert gradcheck(lambda: ad.mean(head.log_prob(x, o)), head.parameters() + [o]) < 1e-4


def test_head_rejects_zero_layers():
    with pytest.raises(ValueError):
        FlowHead(np.random.default_rng(0), 3, 2, 0, 8)


# -- forecast assembly -------------------------------------------------------------------


def test_forecast_single_sample_point_equals_sample():
    head = random_head(0, 4, 3)
    F = np.random.default_rng(1).standard_normal((2, 3))
    dist = forecast(F, head, 1, 6, None, np.random.default_rng(2))
    assert dist.samples.shape == (1, 6)
    np.testing.assert_array_equal(dist.point, dist.samples[0])


def test_forecast_no_truncation_and_mean():
    head = random_head(0, 4, 3)
    F = np.random.default_rng(1).standard_normal((2, 3))
    dist = forecast(F, head, 7, 8, None, np.random.default_rng(2))
    raw = head.sample(F, 7, np.random.default_rng(2))
    np.testing.assert_array_equal(dist.samples, raw.reshape(7, 8))
    np.testing.assert_allclose(dist.point, dist.samples.sum(0) / 7, rtol=1e-15)


def test_forecast_truncates_and_denormalizes():
    head = random_head(0, 4, 3)
    F = np.random.default_rng(1).standard_normal((3, 2, 3))
    hist = np.random.default_rng(3).standard_normal((3, 20)) * 4 + 10
    _, stats = instance_normalize(hist)
    raw = head.sample(F, 5, np.random.default_rng(2)).reshape(5, 3, 8)[..., :6]
    dist = forecast(F, head, 5, 6, stats, np.random.default_rng(2))
    expected = raw * (stats.std + stats.eps)[None] + stats.mean[None]
    np.testing.assert_allclose(dist.samples, expected, rtol=1e-14)
    assert dist.quantile(0.5).shape == (3, 6)


def test_forecast_horizon_too_long():
    head = random_head(0, 4, 3)
    with pytest.raises(ValueError):
        forecast(np.zeros((2, 3)), head, 3, 9, None, np.random.default_rng(0))
