"""Gumbel-softmax relaxation of architecture decisions and annealing schedules."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TAU_FLOOR = 0.05


@dataclass
class RelaxedChoice:
    """A point on the simplex (last axis) sampled from ``logits`` at ``tau``."""

    m: Tensor
    logits: Tensor
    tau: float

    @property
    def data(self):
        return self.m.data


def _as_m(m):
    if isinstance(m, RelaxedChoice):
        return m.m
    return ad.as_tensor(m)


def gumbel_noise(shape, rng):
    tiny = np.finfo(np.float64).tiny
    u = np.clip(rng.random(shape), tiny, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(alpha, tau, rng=None, noise=None):
    """Relaxed categorical sample along the last axis of ``alpha``.

    ``m = softmax((alpha + g) / tau)`` with ``g`` standard Gumbel noise.  The
    noise is a constant of the graph, so gradients flow to ``alpha`` only.
    Pass ``noise`` to fix ``g`` (zeros reduce this to a tempered softmax).
    """
    if not tau > 0:
        raise ValueError(f"gumbel_softmax_sample: temperature must be positive, got {tau}")
    alpha = ad.as_tensor(alpha)
    if noise is None:
        noise = gumbel_noise(alpha.shape, rng)
    g = Tensor(np.asarray(noise, dtype=alpha.dtype))
    m = ad.softmax(ad.scale(ad.add(alpha, g), 1.0 / tau), axis=-1)
    return RelaxedChoice(m, alpha, float(tau))


def gumbel_max_sample(alpha, rng):
    """Exact categorical draws (argmax of logits + Gumbel noise), one-hot."""
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    idx = np.argmax(a + gumbel_noise(a.shape, rng), axis=-1)
    return np.eye(a.shape[-1])[idx], idx


def width_channel_counts(channels, width_choices):
    return [int(np.floor(r * channels + 1e-9)) for r in width_choices]


def width_basis(channels, width_choices, dtype=None):
    """Stacked 0/1 prefix masks [D, C]; row i keeps the first r_i*C channels."""
    counts = width_channel_counts(channels, width_choices)
    basis = np.zeros((len(counts), channels), dtype=dtype or ad.get_default_dtype())
    for i, n in enumerate(counts):
        basis[i, :n] = 1
    return basis


def width_mask(m, channels, width_choices):
    """Per-channel multipliers ``sum_i m_i M_i`` as a Tensor of shape [C]."""
    m = _as_m(m)
    d = len(width_choices)
    if m.shape != (d,):
        raise ValueError(f"width_mask: expected {d} weights, got shape {m.shape}")
    basis = Tensor(width_basis(channels, width_choices, m.dtype))
    return ad.reshape(ad.matmul(ad.reshape(m, (1, d)), basis), (channels,))


def depth_aggregate(m, ys):
    """``sum_i m_i * y_i`` where ``ys[0]`` is the stage input."""
    m = _as_m(m)
    if m.shape != (len(ys),):
        raise ValueError(f"depth_aggregate: {m.shape[0] if m.ndim else 0} weights for {len(ys)} feature maps")
    shape = ys[0].shape
    for y in ys[1:]:
        if y.shape != shape:
            raise ValueError(f"depth_aggregate: feature map shapes differ, {shape} vs {y.shape}")
    out = None
    for i, y in enumerate(ys):
        if not m.requires_grad and m.data[i] == 0:
            continue
        term = ad.mul(y, ad.index(m, i))
        out = term if out is None else ad.add(out, term)
    if out is None:
        out = Tensor(np.zeros(shape, dtype=ys[0].dtype))
    return out


@dataclass
class ScheduleState:
    """Gumbel temperature and entropy coefficient for a given epoch.

    ``tau = tau0 * decay**epoch`` (floored at ``TAU_FLOOR``) and
    ``lambda_ent = lambda0 + lambda_step * epoch``.
    """

    epoch: int = 0
    tau0: float = 1.0
    tau_decay: float = 0.9
    lambda0: float = -0.01
    lambda_step: float = 0.001

    @property
    def tau(self):
        return max(self.tau0 * self.tau_decay**self.epoch, TAU_FLOOR)

    @property
    def lambda_ent(self):
        return self.lambda0 + self.lambda_step * self.epoch


def advance_schedules(state):
    return ScheduleState(state.epoch + 1, state.tau0, state.tau_decay, state.lambda0, state.lambda_step)
