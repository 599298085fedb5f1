import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vird.geometry import ImageFrame, PolarConfig, Pose, crop_indices, make_pose_grid, wrap_angle
from vird.posesearch import (NORM_EPS, RegressionConfig, RegressionHead, SimilarityVolume, coarse_match,
                             infonce_loss, regress_residual, regression_loss, sample_training_residual_poses,
                             similarity_scores, similarity_volume)

FRAME = ImageFrame(0.5, 64, 64)


def grid(G, n_theta, W_s=16):
    return make_pose_grid(16, G, n_theta, FRAME, PolarConfig(0, 8, 4, W_s))


def naive_volume(D_g, D_s, g):
    """Triple loop over positions and yaws with per-candidate 1-D cosine."""
    W_g = D_g.shape[0]
    gv = D_g.reshape(-1)
    gv = gv / gv.norm().clamp_min(NORM_EPS)
    out = torch.empty(g.G, g.G, g.n_theta, dtype=D_g.dtype)
    for ix in range(g.G):
        for iy in range(g.G):
            for t in range(g.n_theta):
                idx = torch.as_tensor(crop_indices(int(g.shifts[t]), g.W_s, W_g))
                sv = D_s[ix * g.G + iy][idx].reshape(-1)
                sv = sv / sv.norm().clamp_min(NORM_EPS)
                out[ix, iy, t] = (sv * gv).sum()
    return out


def naive_argmax(scores):
    flat = scores.reshape(-1).tolist()
    best = 0
    for i, v in enumerate(flat):
        if v > flat[best]:
            best = i
    return best


@pytest.mark.parametrize("seed", range(5))
def test_volume_matches_naive_oracle(seed):
    g = grid(2, 4)
    gen = torch.Generator().manual_seed(seed)
    D_g = torch.randn(16, 8, generator=gen)
    D_s = torch.randn(4, 16, 8, generator=gen)
    vol = similarity_volume(D_g, D_s, g)
    ref = naive_volume(D_g, D_s, g)
    assert torch.equal(vol.scores, ref)
    assert coarse_match(vol)[1] == naive_argmax(ref)


def test_identical_and_orthogonal_scores():
    D_g = torch.randn(16, 8)
    D_s = torch.zeros(1, 16, 8)
    D_s[0] = D_g
    assert similarity_scores(D_g, D_s, [0])[0, 0].item() == pytest.approx(1.0)
    a = torch.zeros(4, 2)
    a[:, 0] = 1
    b = torch.zeros(1, 4, 2)
    b[0, :, 1] = 1
    assert similarity_scores(a, b, [0])[0, 0].item() == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_scores_bounded(seed):
    gen = torch.Generator().manual_seed(seed)
    s = similarity_scores(torch.randn(16, 8, generator=gen), torch.randn(5, 16, 8, generator=gen), range(-8, 8))
    assert torch.all(s.abs() <= 1 + 1e-6)


def test_chunked_and_threaded_volume_identical():
    g = grid(5, 16)
    D_g, D_s = torch.randn(16, 8), torch.randn(25, 16, 8)
    ref = similarity_volume(D_g, D_s, g).scores
    assert torch.equal(similarity_volume(D_g, D_s, g, chunk=7).scores, ref)
    assert torch.equal(similarity_volume(D_g, D_s, g, chunk=3, jobs=3).scores, ref)


def test_volume_count_mismatch():
    with pytest.raises(ValueError):
        similarity_volume(torch.randn(16, 8), torch.randn(3, 16, 8), grid(2, 4))


def test_infonce_uniform():
    assert infonce_loss(torch.zeros(2, 3, 4), 5).item() == pytest.approx(math.log(24))


def test_infonce_scalar_oracle():
    tau = 0.05
    s = torch.tensor([0.9, 0.1, 0.2], dtype=torch.float64)
    e = [math.exp(v / tau) for v in (0.9, 0.1, 0.2)]
    expected = -math.log(e[0] / (e[1] + e[2] + e[0]))
    assert infonce_loss(s, 0, tau).item() == pytest.approx(expected, rel=1e-12)


def test_infonce_dominant_limit_and_errors():
    s = torch.tensor([50.0, 0.0, 0.0])
    assert infonce_loss(s, 0, 0.05).item() < 1e-12
    with pytest.raises(IndexError):
        infonce_loss(s, 3)
    with pytest.raises(ValueError):
        infonce_loss(s, 0, 0.0)


@given(st.floats(-1, 0.99), st.floats(0.001, 0.5))
def test_infonce_monotone_in_positive(s_star, bump):
    others = torch.tensor([0.3, -0.2, 0.5], dtype=torch.float64)
    a = infonce_loss(torch.cat([torch.tensor([s_star], dtype=torch.float64), others]), 0, 0.5)
    b = infonce_loss(torch.cat([torch.tensor([s_star + bump], dtype=torch.float64), others]), 0, 0.5)
    assert b < a


def test_infonce_gradcheck():
    s = torch.rand(2, 7, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: infonce_loss(x, torch.tensor([1, 4]), 0.05), (s,), eps=1e-6,
                                    atol=1e-8, rtol=1e-4)


def test_coarse_match_single_and_ties():
    g = grid(1, 1)
    assert coarse_match(SimilarityVolume(torch.zeros(1, 1, 1), g))[0] == g.pose(0, 0, 0)
    g = grid(2, 4)
    s = torch.zeros(2, 2, 4)
    s[1, 0, 2] = s[0, 1, 3] = 0.9
    pose, flat = coarse_match(SimilarityVolume(s, g))
    assert flat == (0 * 2 + 1) * 4 + 3 and pose == g.pose(0, 1, 3)
    with pytest.raises(ValueError):
        coarse_match(SimilarityVolume(torch.zeros(0), g))


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_coarse_match_invariant_to_monotone_map(seed):
    g = grid(2, 4)
    s = torch.rand(2, 2, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    flat = coarse_match(SimilarityVolume(s, g))[1]
    assert flat == naive_argmax(s)
    assert coarse_match(SimilarityVolume(torch.exp(3 * s) - 2, g))[1] == flat


def _head(**kw):
    torch.manual_seed(0)
    return RegressionHead(2, 4, RegressionConfig(**kw)).double()


def test_zero_final_layer_gives_zero_residual():
    head = _head()
    with torch.no_grad():
        head.fc2.weight.zero_()
        head.fc2.bias.zero_()
    delta = regress_residual(torch.randn(3, 4, 2, dtype=torch.float64), torch.randn(3, 4, 2, dtype=torch.float64),
                             torch.zeros(3, 3, dtype=torch.float64), head, 8.0)
    assert torch.equal(delta, torch.zeros(3, 3, dtype=torch.float64))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 1e3))
def test_residual_within_ranges(scale):
    head = _head()
    D = torch.randn(5, 4, 2, dtype=torch.float64) * scale
    p = torch.randn(5, 3, dtype=torch.float64) * scale
    delta = regress_residual(D, -D, p, head, 8.0)
    lim = torch.tensor(head.cfg.ranges, dtype=torch.float64)
    assert torch.all(delta.abs() <= lim)


def test_regression_forward_oracle():
    """Layer-by-layer evaluation with fixed weights (K_g = 8)."""
    cfg = RegressionConfig(conv_widths=(1,), kernel=1, hidden=1, frame="world")
    head = RegressionHead(2, 4, cfg, circular=False).double()
    with torch.no_grad():
        head.convs[0].weight.copy_(torch.tensor([[[1.0], [-1.0]]]))
        head.convs[0].bias.zero_()
        head.fc1.weight.copy_(torch.tensor([[0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 0.0, 0.0]]))
        head.fc1.bias.zero_()
        head.fc2.weight.copy_(torch.tensor([[1.0], [0.0], [-1.0]]))
        head.fc2.bias.zero_()
    D_g = torch.tensor([[[3.0, 1.0], [0.0, 2.0], [1.0, 1.0], [2.0, 0.0]]], dtype=torch.float64)
    D_s = torch.zeros_like(D_g)
    D_s[0, 0, 0] = 1.0
    p = torch.tensor([[2.0, -4.0, 0.3]], dtype=torch.float64)
    out = regress_residual(D_g, D_s, p, head, 8.0)[0]
    g = (D_g / D_g.norm()).reshape(4, 2)
    s = (D_s / D_s.norm()).reshape(4, 2)
    diff = g - s
    conv = [max(float(diff[w, 0] - diff[w, 1]), 0.0) for w in range(4)]
    h = max(0.5 * sum(conv) + 2.0 / 8.0 - 4.0 / 8.0, 0.0)
    expected = [math.tanh(h) * cfg.dx_max, 0.0, math.tanh(-h) * cfg.dtheta_max]
    assert out.tolist() == pytest.approx(expected, abs=1e-12)


def test_regression_loss_values():
    z = torch.zeros(1, 3, dtype=torch.float64)
    d = torch.tensor([[1.0, 0.0, 0.1]], dtype=torch.float64)
    assert regression_loss(d, z, 5).item() == pytest.approx(5.5)
    assert regression_loss(d, d, 5).item() == 0
    assert regression_loss(d, z, 0).item() == 0


def test_regression_loss_gradcheck():
    d = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    t = torch.randn(4, 3, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda x: regression_loss(x, t, 5.0), (d,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_regression_head_gradcheck():
    head = _head(conv_widths=(3,), hidden=4)
    D_g = torch.randn(2, 4, 2, dtype=torch.float64, requires_grad=True)
    D_s = torch.randn(2, 4, 2, dtype=torch.float64)
    p = torch.randn(2, 3, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda d: regress_residual(d, D_s, p, head, 8.0), (D_g,), eps=1e-6,
                                    atol=1e-8, rtol=1e-4)


def test_training_samples_box_and_determinism():
    cfg = RegressionConfig(n_r=50)
    p = Pose(1.0, -2.0, 0.4)
    a = sample_training_residual_poses(p, cfg, np.random.default_rng(3), 64)
    b = sample_training_residual_poses(p, cfg, np.random.default_rng(3), 64)
    assert [q.as_tuple() for q, _ in a] == [q.as_tuple() for q, _ in b]
    half_col = math.pi / 64
    for q, (dx, dy, dt) in a:
        assert abs(q.x - p.x) <= cfg.dx_max and abs(q.y - p.y) <= cfg.dy_max
        assert abs(wrap_angle(q.theta - p.theta)) <= cfg.dtheta_max + half_col + 1e-12
        assert (q.x + dx, q.y + dy) == pytest.approx((p.x, p.y))
        assert wrap_angle(q.theta + dt) == pytest.approx(p.theta)
        assert (q.theta / (2 * math.pi) * 64) == pytest.approx(round(q.theta / (2 * math.pi) * 64), abs=1e-9)


def test_degenerate_box_returns_snapped_truth():
    cfg = RegressionConfig(dx_max=1e-12, dy_max=1e-12, dtheta_max_deg=1e-12, n_r=3)
    p = Pose(0.5, 0.5, 2 * math.pi * 3 / 16)
    for q, _ in sample_training_residual_poses(p, cfg, np.random.default_rng(0), 16):
        assert q.as_tuple() == pytest.approx(p.as_tuple())


def test_regression_config_validation():
    with pytest.raises(ValueError):
        RegressionConfig(n_r=0)
    with pytest.raises(ValueError):
        RegressionConfig(dx_max=0)


def test_heading_frame_rotation():
    from vird.posesearch import heading_to_world

    cfg = RegressionConfig(dx_max=10, dy_max=10)
    fwd = torch.tensor([[1.0, 0.0, 0.02]], dtype=torch.float64)
    # yaw +90 deg is clockwise from east, i.e. facing south
    out = heading_to_world(fwd, torch.tensor([math.pi / 2], dtype=torch.float64), cfg)
    assert out[0].tolist() == pytest.approx([0.0, -1.0, 0.02], abs=1e-12)
    left = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
    assert heading_to_world(left, torch.zeros(1, dtype=torch.float64), cfg)[0].tolist() == pytest.approx([0, 1, 0])
    big = torch.tensor([[10.0, 10.0, 0.0]], dtype=torch.float64)
    assert heading_to_world(big, torch.tensor([0.7], dtype=torch.float64), cfg).abs().max() <= 10
