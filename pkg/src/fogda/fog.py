"""Fog image formation, dark-channel-prior defogging, and map normalization.

Images are channel-first float64 arrays (C, H, W) with values in [0, 1];
depth and transmission maps are (H, W). The scattering composition is
I = J*t + A*(1 - t) with t = exp(-beta*D), shared by the synthesizer and
the defogger so the two stay inverses of each other.

All functions are pure; none touch global state or RNGs.
"""

from __future__ import annotations

import numpy as np

from . import kernels

T_MIN = 0.1
OMEGA = 0.95
PATCH = 7
DEFAULT_AIRLIGHT = (0.9, 0.9, 0.9)
AIRLIGHT_FLOOR = 1e-3
BRIGHT_FRACTION = 0.001


def _as_map(values, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"{name} must be a 2-d map, got shape {v.shape}")
    return v


def _as_image(values, name: str = "image") -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3:
        raise ValueError(f"{name} must be (C, H, W) or (H, W), got shape {np.shape(values)}")
    return v


def _airlight_vector(airlight, channels: int) -> np.ndarray:
    a = np.asarray(airlight, dtype=np.float64).reshape(-1)
    if a.size == 1:
        a = np.full(channels, a[0])
    if a.size != channels:
        raise ValueError(f"airlight has {a.size} components for a {channels}-channel image")
    return a


def transmission_from_depth(depth, beta: float) -> np.ndarray:
    """t(x) = exp(-beta * D(x)) for depth in meters."""
    d = _as_map(depth, "depth")
    beta = float(beta)
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if np.any(d < 0):
        raise ValueError("depth must be non-negative everywhere")
    return np.exp(-beta * d)


def apply_fog(clear, t, airlight=DEFAULT_AIRLIGHT) -> np.ndarray:
    """Scattering composition I = J*t + A*(1 - t), per channel."""
    j = _as_image(clear, "clear")
    tm = _as_map(t, "t")
    if tm.shape != j.shape[1:]:
        raise ValueError(f"transmission shape {tm.shape} does not match image shape {j.shape}")
    a = _airlight_vector(airlight, j.shape[0])
    return j * tm[None] + a[:, None, None] * (1.0 - tm[None])


def dehaze_exact(foggy, t, airlight=DEFAULT_AIRLIGHT, t_min: float = T_MIN) -> np.ndarray:
    """Invert the scattering composition: J = (I - A)/max(t, t_min) + A.

    Output is clamped to [0, 1]. With the true (t, A) and t >= t_min this
    recovers the clear image to float round-off.
    """
    i = _as_image(foggy, "foggy")
    tm = _as_map(t, "t")
    if tm.shape != i.shape[1:]:
        raise ValueError(f"transmission shape {tm.shape} does not match image shape {i.shape}")
    a = _airlight_vector(airlight, i.shape[0])[:, None, None]
    denom = np.maximum(tm, t_min)[None]
    return np.clip((i - a) / denom + a, 0.0, 1.0)


def dark_channel(image, patch: int = PATCH) -> np.ndarray:
    """Minimum over channels then over a patch window clamped at the borders."""
    img = _as_image(image)
    patch = int(patch)
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch must be odd and >= 1, got {patch}")
    channel_min = img.min(axis=0)
    if patch == 1:
        return channel_min
    return kernels.min_filter(np.ascontiguousarray(channel_min), patch)


def estimate_transmission_dcp(image, airlight, omega: float = OMEGA, patch: int = PATCH) -> np.ndarray:
    """Dark-channel transmission estimate: 1 - omega*dark(I/A), in [t_min, 1]."""
    img = _as_image(image)
    a = _airlight_vector(airlight, img.shape[0])
    if np.any(a <= 0):
        raise ValueError("airlight components must be > 0")
    dark = dark_channel(img / a[:, None, None], patch)
    return np.clip(1.0 - float(omega) * dark, T_MIN, 1.0)


def estimate_airlight(image, patch: int = PATCH) -> np.ndarray:
    """Mean color of the brightest 0.1% of pixels ranked by dark channel."""
    img = _as_image(image)
    dark = dark_channel(img, patch)
    n_pixels = dark.size
    n_bright = max(1, int(n_pixels * BRIGHT_FRACTION))
    order = np.argsort(-dark.reshape(-1), kind="stable")[:n_bright]
    flat = img.reshape(img.shape[0], -1)
    return flat[:, order].mean(axis=1)


def dcp_defog(image, omega: float = OMEGA, patch: int = PATCH):
    """Defog with estimated airlight and transmission.

    Returns (defogged image, t_hat, a_hat). Estimated airlight is floored
    away from zero so the transmission estimate stays defined on very dark
    inputs.
    """
    img = _as_image(image)
    a_hat = np.maximum(estimate_airlight(img, patch), AIRLIGHT_FLOOR)
    t_hat = estimate_transmission_dcp(img, a_hat, omega=omega, patch=patch)
    defogged = dehaze_exact(img, t_hat, a_hat)
    return defogged, t_hat, a_hat


def normalize_map(values) -> np.ndarray:
    """Min-max normalize a map; ranges below 1e-8 collapse to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("normalize_map requires finite values")
    vmin = v.min()
    vmax = v.max()
    if vmax - vmin < 1e-8:
        return np.zeros_like(v)
    return (v - vmin) / (vmax - vmin)
