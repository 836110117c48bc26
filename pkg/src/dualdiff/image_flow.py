"""Rectified-flow diffusion over continuous grids.

Straight-line interpolant x_t = (1-t) x + t eps between data and unit
Gaussian noise; the regression target is the constant velocity eps - x.
Sampling integrates the learned field backward from t = 1 with explicit
Euler steps, optionally re-weighting conditional and unconditional
predictions for guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import NumericError, RangeError, ShapeError

TIMESTEP_CLIP = 1e-5


@dataclass(frozen=True)
class FlowSchedule:
    """The straight-path schedule: data weight 1 - t, noise weight t."""

    def alpha(self, t):
        return 1.0 - t

    def sigma(self, t):
        return t


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scale and the null conditioning used for the unconditional branch."""

    scale: float
    null_text: object = None

    def __post_init__(self):
        if self.scale < 0.0:
            raise RangeError(f"guidance scale must be >= 0, got {self.scale}")


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, got {a.shape} and {b.shape}")


def interpolate(x, noise, t):
    """Corrupted state (1 - t) * x + t * noise.

    t may be a scalar or a per-sample array broadcast over leading axes.
    """
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_same_shape("interpolate", x, noise)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise RangeError(f"interpolate: t outside [0, 1]: {t}")
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x.ndim - t.ndim))
    return (1.0 - t) * x + t * noise


def velocity_target(x, noise):
    """Regression target noise - x; constant along the straight path."""
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_same_shape("velocity_target", x, noise)
    return noise - x


def fm_loss(pred, x, noise):
    """Mean squared error of the prediction against noise - x.

    ``pred`` may be a taped Tensor (training) or a plain array; the result is
    averaged over every element.
    """
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_same_shape("fm_loss", x, noise)
    if not isinstance(pred, tc.Tensor):
        pred = tc.constant(pred)
    _check_same_shape("fm_loss", pred.data, x)
    diff = tc.add(pred, tc.constant(x - noise))
    return tc.scale(tc.sum_of_squares(diff), 1.0 / diff.data.size)


def sample_timestep(rng, size=None):
    """Timestep draw: logistic-transformed standard normal on (0, 1).

    Symmetric around 1/2 with mass pushed toward the middle; clipped to
    [1e-5, 1 - 1e-5] so downstream weights stay finite.
    """
    n = rng.standard_normal(size)
    return np.clip(1.0 / (1.0 + np.exp(-n)), TIMESTEP_CLIP, 1.0 - TIMESTEP_CLIP)


def cfg_velocity(v_cond, v_uncond, s):
    """Guided field s * v_cond + (1 - s) * v_uncond."""
    v_cond = np.asarray(v_cond, dtype=np.float64)
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    _check_same_shape("cfg_velocity", v_cond, v_uncond)
    if s < 0.0:
        raise RangeError(f"cfg_velocity: scale must be >= 0, got {s}")
    return s * v_cond + (1.0 - s) * v_uncond


def euler_sample(velocity_fn, text_cond, shape, steps, guidance, rng):
    """Integrate the velocity field from t = 1 (noise) down to t = 0.

    ``velocity_fn(x, t, cond)`` evaluates the field; when a guidance config
    with scale != 1 is given, the conditional and null-conditioned fields are
    combined per step (two evaluations); scale == 1 or ``guidance=None`` runs
    the single-evaluation path, and the two are bit-identical by construction.
    """
    if steps < 1:
        raise RangeError(f"euler_sample: steps must be >= 1, got {steps}")
    x = rng.standard_normal(shape)
    dt = 1.0 / steps
    guided = guidance is not None and guidance.scale != 1.0
    for k in range(steps):
        t = 1.0 - k / steps
        v = velocity_fn(x, t, text_cond)
        if guided:
            v_uncond = velocity_fn(x, t, guidance.null_text)
            v = cfg_velocity(v, v_uncond, guidance.scale)
        x = x - dt * np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"euler_sample: non-finite state at step {k} (t={t:g})")
    return x
