"""Cosine noise schedule, forward corruption, and eps/x0/score conversions.

The schedule lives on t in [0, 1]: alpha(0)=1, sigma(0)=0 at the clean end
and alpha(1)=0, sigma(1)=1 at full noise, with alpha^2 + sigma^2 = 1 and a
strictly decreasing log signal-to-noise ratio in between. All functions
accept scalar t or a per-sample 1-d array of t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcore import Tensor, add, mul

__all__ = [
    "NoiseSchedule",
    "cosine_schedule",
    "forward_diffuse",
    "eps_to_x0",
    "x0_to_eps",
    "score_from_eps",
    "pf_ode_coeffs",
]

# alpha below this is treated as a singular conversion point
ALPHA_FLOOR = 1e-6


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine schedule alpha(t)=cos(pi t / 2), sigma(t)=sin(pi t / 2).

    ``conversion_t_max`` caps t inside the algebraic eps<->x0 inversion
    (clamped callers only); the network itself always sees the true t.
    ``loss_weight`` is the per-timestep weighting of the denoising
    objective, identically 1 under eps-prediction.
    """

    kind: str = "cosine"
    conversion_t_max: float = 1.0 - 1e-3

    def __post_init__(self):
        if self.kind != "cosine":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        if not 0.0 < self.conversion_t_max < 1.0:
            raise ValueError("conversion_t_max must lie in (0, 1)")

    def alpha(self, t):
        return np.cos(0.5 * np.pi * np.asarray(t, dtype=np.float64))

    def sigma(self, t):
        return np.sin(0.5 * np.pi * np.asarray(t, dtype=np.float64))

    def dlog_alpha(self, t):
        t = np.asarray(t, dtype=np.float64)
        return -0.5 * np.pi * np.tan(0.5 * np.pi * t)

    def dsigma2(self, t):
        t = np.asarray(t, dtype=np.float64)
        return 0.5 * np.pi * np.sin(np.pi * t)

    def log_snr(self, t):
        t = np.asarray(t, dtype=np.float64)
        return 2.0 * (np.log(self.alpha(t)) - np.log(self.sigma(t)))

    def loss_weight(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64))


def cosine_schedule(conversion_t_max: float = 1.0 - 1e-3) -> NoiseSchedule:
    return NoiseSchedule(kind="cosine", conversion_t_max=conversion_t_max)


def _check_t(t, lo=0.0, hi=1.0):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < lo) or np.any(t > hi):
        raise ValueError(f"timestep out of [{lo}, {hi}]: {t}")
    return t


def _col(values, like: Tensor):
    """Per-sample scalars shaped for broadcasting against (n, d) data."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return Tensor(values)
    if like.data.ndim == 2 and values.shape == (like.data.shape[0],):
        return Tensor(values[:, None])
    raise ValueError(f"per-sample t of shape {values.shape} does not match data {like.shape}")


def forward_diffuse(z0, t, eps, sched: NoiseSchedule) -> Tensor:
    """Corrupt z0 to its time-t marginal: alpha(t) * z0 + sigma(t) * eps."""
    z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    t = _check_t(t)
    return add(mul(z0, _col(sched.alpha(t), z0)), mul(eps, _col(sched.sigma(t), eps)))


def _conversion_t(t, sched: NoiseSchedule, clamp: bool):
    t = _check_t(t)
    if clamp:
        t = np.minimum(t, sched.conversion_t_max)
    alpha = sched.alpha(t)
    if np.any(alpha < ALPHA_FLOOR):
        raise ValueError(f"eps<->x0 conversion singular at t={t} (alpha < {ALPHA_FLOOR})")
    return t, alpha


def eps_to_x0(z_t, eps_hat, t, sched: NoiseSchedule, *, clamp: bool = False) -> Tensor:
    """Invert the forward process: x0 = (z_t - sigma(t) * eps_hat) / alpha(t).

    With ``clamp=True`` the conversion t is capped at
    ``sched.conversion_t_max`` so the inversion stays finite at t=1.
    """
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)
    t, alpha = _conversion_t(t, sched, clamp)
    sigma = sched.sigma(t)
    inv = 1.0 / alpha
    return add(mul(z_t, _col(inv, z_t)), mul(eps_hat, _col(-sigma * inv, eps_hat)))


def x0_to_eps(z_t, x0, t, sched: NoiseSchedule) -> Tensor:
    """Inverse of eps_to_x0: eps = (z_t - alpha(t) * x0) / sigma(t)."""
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    t = _check_t(t)
    sigma = sched.sigma(t)
    if np.any(sigma < ALPHA_FLOOR):
        raise ValueError(f"x0_to_eps singular at t={t} (sigma ~ 0)")
    inv = 1.0 / sigma
    return add(mul(z_t, _col(inv, z_t)), mul(x0, _col(-sched.alpha(t) * inv, x0)))


def score_from_eps(eps_hat, t, sched: NoiseSchedule) -> Tensor:
    """Score of the time-t marginal implied by a noise prediction: -eps/sigma(t)."""
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)
    t = _check_t(t)
    sigma = sched.sigma(t)
    if np.any(sigma <= 0.0):
        raise ValueError("score undefined at t=0 (sigma = 0)")
    return mul(eps_hat, _col(-1.0 / sigma, eps_hat))


def pf_ode_coeffs(t: float, sched: NoiseSchedule) -> tuple[float, float]:
    """Drift factor and squared diffusion of the probability-flow ODE.

    Returns (f_coeff, g2) with drift f_coeff * x and
    g2 = d(sigma^2)/dt - 2 * dlog(alpha)/dt * sigma^2. Endpoints are
    singular and rejected.
    """
    t = float(t)
    if not 0.0 < t < 1.0:
        raise ValueError(f"pf_ode_coeffs needs t in (0, 1), got {t}")
    f_coeff = float(sched.dlog_alpha(t))
    sigma2 = float(sched.sigma(t)) ** 2
    g2 = float(sched.dsigma2(t)) - 2.0 * f_coeff * sigma2
    return f_coeff, g2
