"""Unit tests for the fog formation model, DCP defogging, and map
normalization, including oracle runs over rendered scenes."""

import math

import numpy as np
import pytest

from fogda import fog
from fogda.scenes import SceneSpec, render_scene


def rand_image(rng, size=16):
    return rng.uniform(0.0, 1.0, (3, size, size))


# -- transmission_from_depth -------------------------------------------------

def test_transmission_beta_zero_is_ones():
    d = np.full((4, 4), 13.0)
    np.testing.assert_array_equal(fog.transmission_from_depth(d, 0.0), np.ones((4, 4)))

def test_transmission_scalar_value():
    t = fog.transmission_from_depth(np.full((1, 1), 1.0), math.log(2.0))
    assert abs(t[0, 0] - 0.5) < 1e-15

def test_transmission_monotone_in_depth():
    t = fog.transmission_from_depth(np.array([[1.0, 2.0, 10.0]]), 0.07)
    assert t[0, 0] > t[0, 1] > t[0, 2]

def test_transmission_rejects_negative_depth():
    with pytest.raises(ValueError):
        fog.transmission_from_depth(np.array([[-0.1]]), 0.1)
    with pytest.raises(ValueError):
        fog.transmission_from_depth(np.array([[1.0]]), -0.1)


# -- apply_fog / dehaze_exact ------------------------------------------------

def test_apply_fog_identity_at_t1():
    rng = np.random.default_rng(0)
    img = rand_image(rng)
    out = fog.apply_fog(img, np.ones((16, 16)))
    np.testing.assert_array_equal(out, img)

def test_apply_fog_full_fog_is_airlight():
    rng = np.random.default_rng(1)
    img = rand_image(rng)
    out = fog.apply_fog(img, np.zeros((16, 16)), airlight=(0.8, 0.85, 0.9))
    for c, a in enumerate((0.8, 0.85, 0.9)):
        np.testing.assert_array_equal(out[c], np.full((16, 16), a))

def test_apply_fog_scalar_case():
    out = fog.apply_fog(np.full((3, 1, 1), 0.5), np.full((1, 1), 0.5), airlight=1.0)
    np.testing.assert_allclose(out, 0.75)

def test_apply_fog_stays_in_unit_interval():
    rng = np.random.default_rng(2)
    img = rand_image(rng)
    t = rng.uniform(0.0, 1.0, (16, 16))
    out = fog.apply_fog(img, t)
    assert out.min() >= 0.0 and out.max() <= 1.0

def test_apply_fog_shape_mismatch():
    with pytest.raises(ValueError):
        fog.apply_fog(np.zeros((3, 4, 4)), np.zeros((5, 5)))

def test_dehaze_round_trip():
    rng = np.random.default_rng(3)
    img = rand_image(rng)
    t = rng.uniform(0.2, 1.0, (16, 16))
    a = (0.9, 0.9, 0.9)
    back = fog.dehaze_exact(fog.apply_fog(img, t, a), t, a)
    assert np.max(np.abs(back - img)) < 1e-9

def test_dehaze_airlight_fixed_point():
    a = (0.85, 0.9, 0.95)
    foggy = np.stack([np.full((8, 8), v) for v in a])
    t = np.random.default_rng(4).uniform(0.05, 1.0, (8, 8))
    out = fog.dehaze_exact(foggy, t, a)
    np.testing.assert_allclose(out, foggy, atol=1e-12)

def test_dehaze_t1_is_identity():
    rng = np.random.default_rng(5)
    img = rand_image(rng)
    out = fog.dehaze_exact(img, np.ones((16, 16)))
    np.testing.assert_allclose(out, img, atol=1e-15)


# -- dark_channel ------------------------------------------------------------

def test_dark_channel_zeros():
    np.testing.assert_array_equal(fog.dark_channel(np.zeros((3, 8, 8)), 3), np.zeros((8, 8)))

def test_dark_channel_constant():
    img = np.full((3, 8, 8), 0.37)
    np.testing.assert_allclose(fog.dark_channel(img, 5), np.full((8, 8), 0.37))

def test_dark_channel_single_low_pixel():
    img = np.full((3, 3), 0.8)
    img[1, 1] = 0.1
    out = fog.dark_channel(img, 3)
    assert out[1, 1] == 0.1
    # patch 3 centered anywhere on a 3x3 image sees the low pixel
    np.testing.assert_array_equal(out, np.full((3, 3), 0.1))

def test_dark_channel_matches_bruteforce_clamped_window():
    rng = np.random.default_rng(6)
    img = rng.uniform(0, 1, (3, 9, 9))
    patch = 5
    got = fog.dark_channel(img, patch)
    half = patch // 2
    cmin = img.min(axis=0)
    expect = np.empty((9, 9))
    for r in range(9):
        for c in range(9):
            r0, r1 = max(0, r - half), min(9, r + half + 1)
            c0, c1 = max(0, c - half), min(9, c + half + 1)
            expect[r, c] = cmin[r0:r1, c0:c1].min()
    np.testing.assert_array_equal(got, expect)

def test_dark_channel_monotone():
    rng = np.random.default_rng(7)
    img = rng.uniform(0, 0.8, (3, 8, 8))
    brighter = np.clip(img + rng.uniform(0, 0.2, (3, 8, 8)), 0, 1)
    assert np.all(fog.dark_channel(brighter, 5) >= fog.dark_channel(img, 5))

def test_dark_channel_rejects_even_patch():
    with pytest.raises(ValueError):
        fog.dark_channel(np.zeros((3, 4, 4)), 4)


# -- transmission estimation and defogging -----------------------------------

def test_estimate_transmission_airlight_image_clamps_to_floor():
    a = (0.9, 0.9, 0.9)
    img = np.stack([np.full((8, 8), v) for v in a])
    t = fog.estimate_transmission_dcp(img, a)
    np.testing.assert_allclose(t, np.full((8, 8), fog.T_MIN))

def test_estimate_transmission_black_image_is_one():
    t = fog.estimate_transmission_dcp(np.zeros((3, 8, 8)), (0.9, 0.9, 0.9))
    np.testing.assert_array_equal(t, np.ones((8, 8)))

def test_estimate_transmission_rejects_nonpositive_airlight():
    with pytest.raises(ValueError):
        fog.estimate_transmission_dcp(np.zeros((3, 4, 4)), (0.0, 0.9, 0.9))

def test_dcp_defog_deterministic_and_bounded():
    rng = np.random.default_rng(8)
    img = rand_image(rng, 32)
    out1, t1, a1 = fog.dcp_defog(img)
    out2, t2, a2 = fog.dcp_defog(img.copy())
    assert out1.tobytes() == out2.tobytes()
    assert t1.tobytes() == t2.tobytes()
    assert a1.tobytes() == a2.tobytes()
    assert out1.min() >= 0.0 and out1.max() <= 1.0
    assert t1.min() >= fog.T_MIN and t1.max() <= 1.0


# -- normalize_map -----------------------------------------------------------

def test_normalize_map_values():
    np.testing.assert_allclose(fog.normalize_map(np.array([1.0, 2.0, 3.0])), [0, 0.5, 1])

def test_normalize_map_constant_is_zeros():
    np.testing.assert_array_equal(fog.normalize_map(np.full((5, 5), 3.3)), np.zeros((5, 5)))

def test_normalize_map_affine_invariance():
    rng = np.random.default_rng(9)
    v = rng.standard_normal((6, 6))
    for c, d in [(2.0, 5.0), (0.3, -1.0), (17.0, 0.0)]:
        np.testing.assert_allclose(fog.normalize_map(c * v + d), fog.normalize_map(v),
                                   atol=1e-12)

def test_normalize_map_rejects_nonfinite():
    with pytest.raises(ValueError):
        fog.normalize_map(np.array([1.0, np.nan]))

def test_beta_cancellation():
    # Norm(-log t) with t = exp(-beta*D) equals Norm(D) for any uniform beta
    rng = np.random.default_rng(10)
    for _ in range(20):
        depth = rng.uniform(2.0, 80.0, (16, 16))
        beta = rng.uniform(0.01, 0.2)
        t = fog.transmission_from_depth(depth, beta)
        lhs = fog.normalize_map(-np.log(t))
        rhs = fog.normalize_map(depth)
        assert np.max(np.abs(lhs - rhs)) < 1e-9


# -- oracle runs over rendered scenes ----------------------------------------

def _scene(seed, **kw):
    return render_scene(SceneSpec(**kw), seed)

def test_dcp_on_nearly_clear_scene_stays_close():
    spec = SceneSpec(beta_range=(1e-4, 2e-4))
    errors = []
    for seed in range(10):
        s = render_scene(spec, seed)
        defogged, _, _ = fog.dcp_defog(s.foggy)
        errors.append(np.mean(np.abs(defogged - s.foggy)))
    assert float(np.mean(errors)) < 0.15

def test_dcp_defog_improves_foggy_scenes():
    spec = SceneSpec()
    gains = []
    for seed in range(50):
        s = render_scene(spec, seed)
        defogged, _, _ = fog.dcp_defog(s.foggy)
        before = np.mean(np.abs(s.foggy - s.clear))
        after = np.mean(np.abs(defogged - s.clear))
        gains.append(before - after)
    assert float(np.mean(gains)) > 0.0

def test_dcp_omega_sweep_prefers_095():
    spec = SceneSpec()
    def mean_t_err(omega):
        errs = []
        for seed in range(30):
            s = render_scene(spec, seed)
            a_hat = fog.estimate_airlight(s.foggy)
            t_hat = fog.estimate_transmission_dcp(s.foggy, np.maximum(a_hat, 1e-3),
                                                  omega=omega)
            errs.append(np.mean(np.abs(t_hat - s.t_gt)))
        return float(np.mean(errs))
    assert mean_t_err(0.95) < mean_t_err(0.5)
