import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fxd.losses import (LossWeights, depth_far_ranking_loss, depth_near_loss, masked_ssim, rgb_loss,
                        total_loss)
from fxd.metrics import FeatureStats, fid, fid_mean_shift_demo, image_features, psnr, ssim

images = arrays(np.float64, (12, 12, 3), elements=st.floats(0, 1))


def _stats(mean, cov):
    return FeatureStats(np.asarray(mean, float), np.asarray(cov, float))


def _fid_reference(m1, c1, m2, c2):
    """Frechet distance via an eigendecomposition of sqrt(C1) C2 sqrt(C1)."""
    w, v = np.linalg.eigh(c1)
    r1 = v @ np.diag(np.sqrt(np.clip(w, 0, None))) @ v.T
    cw = np.linalg.eigvalsh(r1 @ c2 @ r1)
    return np.sum((m1 - m2) ** 2) + np.trace(c1) + np.trace(c2) - 2 * np.sum(np.sqrt(np.clip(cw, 0, None)))


def test_rgb_identical_zero():
    img = np.random.default_rng(0).random((16, 16, 3))
    assert float(rgb_loss(img, img)) == pytest.approx(0, abs=1e-12)


def test_rgb_pure_l1():
    a, b = np.full((8, 8, 3), 0.5), np.full((8, 8, 3), 0.7)
    assert float(rgb_loss(a, b, alpha_ssim=0)) == pytest.approx(0.2)


def test_rgb_in_path_only_reduces():
    rng = np.random.default_rng(1)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    want = np.abs(a - b).mean() + 0.2 * (1 - float(masked_ssim(a, b)))
    assert float(rgb_loss(a, b, alpha_ssim=0.2)) == pytest.approx(want)


def test_rgb_out_of_path_masked():
    rng = np.random.default_rng(2)
    a = rng.random((8, 8, 3))
    po, pg = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    m = np.zeros((8, 8), bool)
    m[2:5, 3:6] = True
    got = float(rgb_loss(a, a, po, pg, m, alpha_ssim=0))
    assert got == pytest.approx(np.abs(po - pg)[m].mean())
    pg2 = pg.copy()
    pg2[~m] = 0.0
    assert float(rgb_loss(a, a, po, pg2, m, alpha_ssim=0)) == pytest.approx(got)


def test_depth_near_cases():
    d = np.array([[11.0]])
    assert float(depth_near_loss(d, np.array([[10.0]]), eps=0)) == pytest.approx(0.1)
    assert float(depth_near_loss(d, d)) == 0.0


@given(arrays(np.float64, (6, 6), elements=st.floats(0.5, 30)), arrays(np.float64, (6, 6), elements=st.floats(0.5, 30)))
def test_depth_near_scale_aware(d, dh):
    a = float(depth_near_loss(d, dh, eps=0, d_max=100))
    b = float(depth_near_loss(2 * d, 2 * dh, eps=0, d_max=200))
    assert a >= 0 and b == pytest.approx(a, rel=1e-12)


def test_far_ranking_cases():
    rng = np.random.default_rng(0)
    dh = np.array([50.0, 60.0, 70.0])
    assert float(depth_far_ranking_loss(dh + 0, dh, n_pairs=64, rng=rng)) == 0.0
    assert float(depth_far_ranking_loss(np.full(3, 45.0), np.full(3, 50.0), n_pairs=64, rng=rng)) == 0.0
    # d_hat_0 < d_hat_1 but d_0 = d_1 + 1
    loss = depth_far_ranking_loss(np.array([61.0, 60.0]), np.array([50.0, 60.0]), margin=1e-4, n_pairs=256, rng=rng)
    assert float(loss) == pytest.approx(1 + 1e-4)


def test_far_ranking_ignores_near():
    loss = depth_far_ranking_loss(np.array([30.0, 1.0]), np.array([10.0, 20.0]), n_pairs=32)
    assert float(loss) == 0.0


def test_total_loss_weights_and_nan():
    w = LossWeights(rgb=1, depth_near=0.5, depth_far=2)
    parts = {"rgb": torch.tensor(1.0), "depth_near": torch.tensor(2.0), "depth_far": torch.tensor(0.5)}
    assert float(total_loss(parts, w)) == pytest.approx(3.0)
    with pytest.raises(FloatingPointError):
        total_loss({"rgb": torch.tensor(float("nan"))}, w)
    with pytest.raises(ValueError):
        LossWeights(d_max=0)


@settings(max_examples=30, deadline=None)
@given(images, images)
def test_losses_nonnegative(a, b):
    assert float(rgb_loss(a, b)) >= -1e-12
    assert float(rgb_loss(a, a)) == pytest.approx(0, abs=1e-9)


def test_psnr_ssim_basics():
    rng = np.random.default_rng(0)
    a = rng.random((20, 20, 3))
    assert psnr(a, a) == 99.0
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0)
    assert ssim(a, a) == pytest.approx(1.0)
    assert -1 <= ssim(a, rng.random((20, 20, 3))) <= 1
    m = np.zeros((20, 20), bool)
    m[:5] = True
    b = a.copy()
    b[~m] = 0
    assert psnr(a, b, m) == 99.0


def test_fid_hand_cases():
    assert fid(_stats([0, 0], np.eye(2)), _stats([1, 0], np.eye(2))) == pytest.approx(1, abs=1e-6)
    assert fid(_stats([0, 0], np.diag([1, 4])), _stats([0, 0], np.diag([4, 1]))) == pytest.approx(2, abs=1e-6)
    s = _stats([1, 2, 3], np.diag([1, 2, 3]))
    assert fid(s, s) == pytest.approx(0, abs=1e-9)


def test_fid_diagonal_path_matches_general():
    # the same covariances with a negligible off-diagonal entry take the general route
    c1, c2 = np.diag([1.0, 4.0]), np.diag([4.0, 1.0])
    c1b = c1 + 1e-14 * np.array([[0, 1], [1, 0]])
    assert fid(_stats([0, 0], c1b), _stats([0, 0], c2)) == pytest.approx(2, abs=1e-6)


def test_fid_errors():
    with pytest.raises(ValueError):
        fid(_stats([0, 0], np.eye(2)), _stats([0, 0, 0], np.eye(3)))
    with pytest.raises(ValueError):
        fid(_stats([0, 0], np.diag([1, -1])), _stats([0, 0], np.eye(2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.integers(2, 6))
def test_fid_properties(seed, d):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3 * d, d)), rng.normal(size=(3 * d, d)) * 2 + 1
    s1, s2 = FeatureStats.from_features(a), FeatureStats.from_features(b)
    f12 = fid(s1, s2)
    assert f12 >= 0
    assert f12 == pytest.approx(fid(s2, s1), abs=1e-6)
    assert f12 == pytest.approx(_fid_reference(s1.mean, s1.cov, s2.mean, s2.cov), rel=1e-6, abs=1e-8)
    shift = rng.normal(size=d)
    assert fid(s1.shifted(s1.mean + shift), s2.shifted(s2.mean + shift)) == pytest.approx(f12, rel=1e-9, abs=1e-9)


def test_mean_shift_demo_exact_removal():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(200, 4))
    b = rng.normal(size=(200, 4))
    rep = fid_mean_shift_demo(a, b, a + 3.0)
    assert rep.fid_realigned == pytest.approx(0, abs=1e-9)
    assert rep.fid_shifted > rep.fid_gt_split > 0
    assert rep.passed


def test_image_features_shape():
    imgs = np.random.default_rng(0).random((3, 64, 96, 3))
    f = image_features(imgs)
    assert f.shape == (3, 64)
    gray = imgs[0] @ [0.299, 0.587, 0.114]
    assert f[0].mean() == pytest.approx(gray.mean(), abs=1e-9)
    assert f[0][0] == pytest.approx(gray[:8, :12].mean(), abs=1e-9)
