"""Absorbing-state masked diffusion over fixed-length token sequences.

Forward corruption masks each position independently with probability 1 - a(t)
under the log-linear schedule a(t) = 1 - t. Reverse sampling walks the exact
posterior: unmasked positions are carried over unchanged, masked positions
either unmask (drawing from the predicted categorical, which puts zero mass on
the mask id) or stay masked. The training loss is the continuous-time bound
estimated at stratified timesteps: one shared uniform draw offset across K
equal slices of (delta, 1].

Sequences may carry a leading batch dimension; ``frozen`` marks conditioning
positions that are never masked and never resampled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import DistributionError, RangeError, ShapeError

MASK_LOGIT_BIAS = -1e9  # exp() underflows to exactly 0.0 in float64


@dataclass(frozen=True)
class Vocab:
    """Token id space; one id is the reserved mask state."""

    size: int
    mask_id: int

    def __post_init__(self):
        if self.size < 3:
            raise RangeError(f"vocab size must be >= 3, got {self.size}")
        if not 0 <= self.mask_id < self.size:
            raise RangeError(f"mask_id {self.mask_id} outside [0, {self.size})")


class TokenSequence:
    """Fixed-length ids with a boolean mask of frozen (conditioning) positions."""

    __slots__ = ("ids", "frozen")

    def __init__(self, ids, frozen=None):
        self.ids = np.asarray(ids, dtype=np.int64)
        if frozen is None:
            frozen = np.zeros(self.ids.shape, dtype=bool)
        self.frozen = np.asarray(frozen, dtype=bool)
        if self.frozen.shape != self.ids.shape:
            raise ShapeError(
                f"frozen shape {self.frozen.shape} != ids shape {self.ids.shape}"
            )

    @property
    def length(self):
        return self.ids.shape[-1]

    def copy(self):
        return TokenSequence(self.ids.copy(), self.frozen.copy())

    def validate_clean(self, vocab):
        """Clean training sequences never contain the mask id."""
        if np.any(self.ids == vocab.mask_id):
            raise DistributionError("clean sequence contains the mask id")
        if self.ids.min() < 0 or self.ids.max() >= vocab.size:
            raise RangeError(f"token ids outside [0, {vocab.size})")


@dataclass(frozen=True)
class NelboConfig:
    """Stratified-timestep settings for the text loss."""

    k: int = 1
    delta: float = 1e-3

    def __post_init__(self):
        if self.k < 1:
            raise RangeError(f"K must be >= 1, got {self.k}")
        # delta = 0 is allowed for exact stratification of (0, 1]; training
        # uses a small positive cutoff to keep the 1/t weight bounded
        if not 0.0 <= self.delta < 1.0:
            raise RangeError(f"delta must lie in [0, 1), got {self.delta}")


def alpha(t):
    """Survival probability of a token at time t: the log-linear schedule 1 - t."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise RangeError(f"t outside [0, 1]: {t}")
    out = 1.0 - t
    return float(out) if out.ndim == 0 else out


def forward_mask(x, t, rng, vocab):
    """Corrupt a clean sequence to time t.

    Each non-frozen position keeps its id with probability alpha(t) and
    becomes the mask id otherwise. Frozen positions are conditioning and are
    never corrupted.
    """
    a = alpha(t)
    keep = rng.random(x.ids.shape) < a
    keep |= x.frozen
    ids = np.where(keep, x.ids, vocab.mask_id)
    return TokenSequence(ids, x.frozen.copy())


def _validate_pred_rows(x_pred, masked, vocab):
    rows = x_pred[masked]
    if rows.size == 0:
        return
    sums = rows.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        worst = float(np.abs(sums - 1.0).max())
        raise DistributionError(f"x_pred row sums off by {worst:.3e} (tolerance 1e-9)")
    if np.any(rows[:, vocab.mask_id] != 0.0):
        raise DistributionError("x_pred places nonzero probability on the mask id")


def _categorical_rows(rows, rng):
    """One draw per row. Rows are renormalized so cumulative mass ends at 1."""
    cum = np.cumsum(rows, axis=-1)
    cum /= cum[:, -1:]
    u = rng.random(rows.shape[0])
    idx = (cum < u[:, None]).sum(axis=-1)
    return np.minimum(idx, rows.shape[-1] - 1)


def posterior_step(x_t, x_pred, s, t, rng, vocab):
    """One reverse step from time t to time s < t.

    Positions already unmasked keep their id (carry-over branch). A masked
    position unmasks with probability (a(s) - a(t)) / (1 - a(t)); when it
    does, its id is drawn from the predicted distribution at that position.
    """
    if s >= t:
        raise RangeError(f"posterior_step: need s < t, got s={s} t={t}")
    a_s, a_t = alpha(s), alpha(t)
    x_pred = np.asarray(x_pred, dtype=np.float64)
    if x_pred.shape != x_t.ids.shape + (vocab.size,):
        raise ShapeError(
            f"x_pred shape {x_pred.shape} != {x_t.ids.shape + (vocab.size,)}"
        )

    masked = x_t.ids == vocab.mask_id
    _validate_pred_rows(x_pred, masked, vocab)

    ids = x_t.ids.copy()
    n_masked = int(masked.sum())
    if n_masked:
        p_unmask = (a_s - a_t) / (1.0 - a_t)
        unmask = rng.random(n_masked) < p_unmask
        draws = _categorical_rows(x_pred[masked].reshape(n_masked, -1), rng)
        new_ids = np.where(unmask, draws, vocab.mask_id)
        ids[masked] = new_ids
    out = TokenSequence(ids, x_t.frozen.copy())
    assert np.array_equal(out.ids[out.frozen], x_t.ids[x_t.frozen])
    return out


def antithetic_times(cfg, u):
    """K stratified timesteps from one shared uniform draw.

    t_i = delta + (1 - delta) * (i - 1 + u) / K for i = 1..K; consecutive gaps
    are all (1 - delta) / K and every t_i lies in (delta, 1).
    """
    if not 0.0 <= u < 1.0:
        raise RangeError(f"u must lie in [0, 1), got {u}")
    i = np.arange(cfg.k, dtype=np.float64)
    return cfg.delta + (1.0 - cfg.delta) * (i + u) / cfg.k


def zero_mask_prob(logits, vocab):
    """Softmax over content classes only; the mask id gets exactly zero mass."""
    logits = np.asarray(logits, dtype=np.float64)
    x = logits.copy()
    x[..., vocab.mask_id] = -np.inf
    x -= x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def mask_logit_bias(vocab):
    """Additive logit bias implementing zero_mask_prob on the tape."""
    bias = np.zeros(vocab.size)
    bias[vocab.mask_id] = MASK_LOGIT_BIAS
    return bias


def nelbo_terms(logits, true_ids, corrupted_ids, times, vocab, info=None):
    """Taped bound estimate shared by the per-sequence and batched losses.

    logits: Tensor (K, L, N) from the model on each corrupted sequence;
    true_ids/corrupted_ids: (K, L); times: (K,). Returns the scalar
    (1/K) * sum_i (1/t_i) * mean over masked positions of -log p(true id).
    """
    times = np.asarray(times, dtype=np.float64)
    if np.any(times <= 0.0):
        raise RangeError(f"nelbo: timesteps must be positive, got {times}")
    if not isinstance(logits, tc.Tensor):
        logits = tc.constant(logits)
    k, length, n = logits.shape
    if n != vocab.size:
        raise ShapeError(f"nelbo: logits vocab {n} != {vocab.size}")
    true_ids = np.asarray(true_ids)
    corrupted_ids = np.asarray(corrupted_ids)

    masked = corrupted_ids == vocab.mask_id
    counts = masked.sum(axis=-1)
    weights = np.zeros((k, length))
    live = counts > 0
    weights[live] = masked[live] / (times[live] * counts[live])[:, None]

    probs = tc.softmax(tc.add(logits, tc.constant(mask_logit_bias(vocab))))
    onehot = np.zeros((k, length, n))
    np.put_along_axis(onehot, true_ids[..., None], 1.0, axis=-1)
    p_true = tc.reshape(
        tc.matmul(
            tc.reshape(tc.multiply(probs, tc.constant(onehot)), (k * length, n)),
            tc.constant(np.ones((n, 1))),
        ),
        (k, length),
    )
    loss = tc.scale(tc.mean(tc.multiply(tc.log(p_true), tc.constant(-weights))), float(length))

    if info is not None:
        p = p_true.data
        info["masked_counts"] = counts.copy()
        info["clamped"] = int(((p < tc.LOG_FLOOR) & masked).sum())
    return loss


def nelbo_loss(logits, x, corrupted, times, vocab, info=None):
    """Monte-Carlo bound for one clean sequence across K timesteps.

    ``corrupted`` holds the K forward-masked versions of ``x`` whose model
    outputs are ``logits``; the loss touches only positions masked at each
    timestep, averages over them, weights by 1/t_i, and averages over i.
    """
    true_ids = np.broadcast_to(x.ids, np.asarray(corrupted).shape)
    return nelbo_terms(logits, true_ids, corrupted, times, vocab, info=info)


def ancestral_sample(predictor, cond_image, init, steps, rng, vocab, on_step=None):
    """Reverse diffusion from all-masked to a complete sequence.

    ``predictor(seq, cond_image)`` must return zero-mask-probability
    distributions of shape ids.shape + (N,). The time grid is uniform,
    t_k = 1 - k/steps, so the final step lands exactly on t = 0 where every
    remaining mask resolves. Frozen positions pass through untouched.
    """
    if steps < 1:
        raise RangeError(f"steps must be >= 1, got {steps}")
    if np.any(init.ids[~init.frozen] != vocab.mask_id):
        raise DistributionError("init must be fully masked outside frozen positions")
    frozen_ref = init.ids[init.frozen].copy()

    seq = init.copy()
    for k in range(steps):
        t = 1.0 - k / steps
        s = 1.0 - (k + 1) / steps
        probs = np.asarray(predictor(seq, cond_image), dtype=np.float64)
        if probs.shape != seq.ids.shape + (vocab.size,):
            raise ShapeError(
                f"predictor output shape {probs.shape} != {seq.ids.shape + (vocab.size,)}"
            )
        seq = posterior_step(seq, probs, s, t, rng, vocab)
        if not np.array_equal(seq.ids[seq.frozen], frozen_ref):
            raise DistributionError("frozen positions were modified during sampling")
        if on_step is not None:
            on_step(k, t, s, seq.ids.copy())

    assert not np.any(seq.ids == vocab.mask_id)
    return seq
