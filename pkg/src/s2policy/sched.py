"""Noise schedules and DDPM/DDIM sampling with clean-sample (x0) prediction.

A single table of cumulative signal coefficients ``alpha_bar`` (index 0..K)
drives both the forward noising process and every reverse step. The
forward process is ``a_k = sqrt(ab_k) * a0 + sqrt(1 - ab_k) * eps``.
The reverse step is the generalized DDIM update; ``eta=0`` gives the
deterministic sampler and ``eta=1`` the ancestral (DDPM) sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ContractViolation, InvalidArgument

SCHEDULE_KINDS = ("squared-cosine",)
COSINE_OFFSET = 0.008
MIN_STEP_RATIO = 0.001


@dataclass(frozen=True)
class NoiseSchedule:
    K: int
    alpha_bar: np.ndarray
    kind: str = "squared-cosine"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.K + 1,):
            raise InvalidArgument(f"alpha_bar must have K+1={self.K + 1} entries, got {ab.shape}")
        if ab[0] != 1.0 or not np.all(np.diff(ab) < 0) or ab[-1] <= 0:
            raise InvalidArgument("alpha_bar must start at 1, decrease strictly and stay positive")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    def signal_scale(self, k):
        """sqrt(alpha_bar[k]); ``k`` may be an int or an integer array."""
        return np.sqrt(self.alpha_bar[k])

    def noise_scale(self, k):
        return np.sqrt(1.0 - self.alpha_bar[k])


def make_schedule(K: int = 100, kind: str = "squared-cosine") -> NoiseSchedule:
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise InvalidArgument(f"K must be an integer >= 1, got {K!r}")
    if kind not in SCHEDULE_KINDS:
        raise InvalidArgument(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")

    s = COSINE_OFFSET
    steps = np.arange(K + 1, dtype=np.float64)
    f = np.cos(((steps / K + s) / (1 + s)) * math.pi / 2) ** 2
    ratios = np.clip(f[1:] / f[:-1], MIN_STEP_RATIO, 1.0)
    alpha_bar = np.concatenate([[1.0], np.cumprod(ratios)])
    return NoiseSchedule(K=int(K), alpha_bar=alpha_bar, kind=kind)


def _coef(table: np.ndarray, k, like):
    """Look up per-sample coefficients and shape them to broadcast against ``like``."""
    c = table[k]
    if np.ndim(c) == 0:
        return float(c)
    c = np.asarray(c).reshape((-1,) + (1,) * (len(like.shape) - 1))
    if _is_torch(like):
        import torch

        return torch.as_tensor(c, dtype=like.dtype, device=like.device)
    return c


def _is_torch(x) -> bool:
    return type(x).__module__.startswith("torch")


def _check_step(sched: NoiseSchedule, k) -> None:
    k_arr = np.asarray(k)
    if k_arr.dtype.kind not in "iu" or np.any(k_arr < 0) or np.any(k_arr > sched.K):
        raise InvalidArgument(f"step index must be an integer in [0, {sched.K}], got {k!r}")


def forward_noise(sched: NoiseSchedule, a0, k, eps):
    """Noise a clean action tensor to step ``k``.

    Works on numpy arrays and torch tensors. ``k`` is either a scalar step or
    one step per leading (batch) row.
    """
    if tuple(a0.shape) != tuple(eps.shape):
        raise InvalidArgument(f"a0 shape {tuple(a0.shape)} != eps shape {tuple(eps.shape)}")
    if _is_torch(k):
        k = k.detach().cpu().numpy()
    _check_step(sched, k)
    sq = np.sqrt(sched.alpha_bar)
    sq1m = np.sqrt(1.0 - sched.alpha_bar)
    return _coef(sq, k, a0) * a0 + _coef(sq1m, k, a0) * eps


def predicted_noise(sched: NoiseSchedule, a_k, k: int, x0_pred):
    """Noise implied by ``a_k`` at step ``k`` given a clean-sample estimate."""
    ab = sched.alpha_bar[k]
    if ab >= 1.0:
        return a_k * 0.0
    return (a_k - math.sqrt(ab) * x0_pred) / math.sqrt(1.0 - ab)


def ddim_step(sched: NoiseSchedule, a_k, k: int, k_prev: int, x0_pred, eta: float = 0.0, z=None):
    """One generalized DDIM update from step ``k`` to ``k_prev < k``."""
    if not (0 <= k_prev < k <= sched.K):
        raise InvalidArgument(f"need 0 <= k_prev < k <= K, got k={k}, k_prev={k_prev}, K={sched.K}")
    if not 0.0 <= eta <= 1.0:
        raise InvalidArgument(f"eta must lie in [0, 1], got {eta}")
    ab = sched.alpha_bar[k]
    ab_prev = sched.alpha_bar[k_prev]
    eps_hat = predicted_noise(sched, a_k, k, x0_pred)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)
    dir_scale = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    out = math.sqrt(ab_prev) * x0_pred + dir_scale * eps_hat
    if sigma > 0.0:
        if z is None:
            raise InvalidArgument("eta > 0 requires a noise tensor z")
        out = out + sigma * z
    return out


def inference_steps(K: int, n_infer_steps: int) -> list[int]:
    """Descending, uniformly strided steps from K down to 0 (n_infer_steps + 1 entries)."""
    if not 1 <= n_infer_steps <= K:
        raise InvalidArgument(f"n_infer_steps must be in [1, {K}], got {n_infer_steps}")
    return [int(v) for v in np.rint(np.linspace(K, 0, n_infer_steps + 1))]


def _standard_normal(rng, shape: tuple[int, ...]) -> np.ndarray:
    # one generator per batch row keeps each row's draws independent of batch composition
    if isinstance(rng, (list, tuple)):
        if len(rng) != shape[0]:
            raise InvalidArgument(f"got {len(rng)} generators for batch of {shape[0]}")
        return np.stack([g.standard_normal(shape[1:]) for g in rng])
    return rng.standard_normal(shape)


def sample_chain(
    sched: NoiseSchedule,
    denoiser: Callable[[np.ndarray, int, Any], np.ndarray],
    conditioning: Any,
    n_infer_steps: int,
    eta: float,
    rng,
    shape: Sequence[int],
) -> np.ndarray:
    """Run the reverse chain from pure noise to a clean sample.

    ``denoiser(a_k, k, conditioning)`` must return a clean-sample estimate of
    the same shape as ``a_k``. ``rng`` is a numpy Generator, or a list with
    one Generator per leading row of ``shape``.
    """
    shape = tuple(int(s) for s in shape)
    steps = inference_steps(sched.K, n_infer_steps)
    a = _standard_normal(rng, shape)
    for k, k_prev in zip(steps[:-1], steps[1:]):
        x0 = np.asarray(denoiser(a, k, conditioning), dtype=np.float64)
        if x0.shape != shape:
            raise ContractViolation(f"denoiser returned shape {x0.shape}, expected {shape}")
        z = _standard_normal(rng, shape) if eta > 0 else None
        a = ddim_step(sched, a, k, k_prev, x0, eta=eta, z=z)
    return a
