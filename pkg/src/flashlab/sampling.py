"""Guidance combination, deterministic solver steps, teacher rollouts, and
the student's few-step sampler.

The DDIM step is the exponential-integrator form: convert the noise
prediction to a clean-sample estimate, then re-corrupt it at the target
time. It is exact for constant noise predictions and composes
self-consistently. The Euler step integrates the probability-flow ODE
directly with score = -eps/sigma; it is kept as an independent
cross-check of the DDIM path. Conversions (and Euler coefficient
evaluations) taken from t=1 are clamped to the schedule's conversion cap,
since the inversion is algebraically singular there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcore import Tensor, add, no_grad, scale
from .schedule import NoiseSchedule, eps_to_x0, forward_diffuse, pf_ode_coeffs
from .timesteps import inference_grid

__all__ = [
    "SolverSpec",
    "cfg_combine",
    "solver_step",
    "teacher_rollout",
    "rollout_grid",
    "student_sample",
    "SOLVER_KINDS",
]

SOLVER_KINDS = ("ddim", "euler_pf_ode")


@dataclass(frozen=True)
class SolverSpec:
    """Solver kind plus a strictly decreasing timestep grid ending at >= 0."""

    kind: str = "ddim"
    grid: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in SOLVER_KINDS:
            raise ValueError(f"unknown solver kind {self.kind!r}; choose from {SOLVER_KINDS}")
        g = self.grid
        if g:
            if any(b >= a for a, b in zip(g, g[1:])):
                raise ValueError("solver grid must be strictly decreasing")
            if g[-1] < 0.0 or g[0] > 1.0:
                raise ValueError("solver grid must lie within [0, 1]")


def cfg_combine(eps_cond: Tensor, eps_uncond: Tensor, guidance: float) -> Tensor:
    """Classifier-free guidance: guidance * cond + (1 - guidance) * uncond."""
    if guidance < 0:
        raise ValueError(f"guidance scale must be >= 0, got {guidance}")
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    return add(scale(eps_cond, guidance), scale(eps_uncond, 1.0 - guidance))


def solver_step(z, eps_tilde, t_from: float, t_to: float, sched: NoiseSchedule,
                kind: str = "ddim"):
    """One deterministic update from t_from down to t_to."""
    if not t_from > t_to >= 0.0:
        raise ValueError(f"need t_from > t_to >= 0, got {t_from} -> {t_to}")
    z = z if isinstance(z, Tensor) else Tensor(z)
    eps_tilde = eps_tilde if isinstance(eps_tilde, Tensor) else Tensor(eps_tilde)
    if kind == "ddim":
        x0_hat = eps_to_x0(z, eps_tilde, t_from, sched, clamp=True)
        return add(scale(x0_hat, float(sched.alpha(t_to))),
                   scale(eps_tilde, float(sched.sigma(t_to))))
    if kind == "euler_pf_ode":
        t_eval = min(t_from, sched.conversion_t_max)
        f_coeff, g2 = pf_ode_coeffs(t_eval, sched)
        sigma = float(sched.sigma(t_eval))
        dt = t_to - t_from
        return add(z, scale(add(scale(z, f_coeff), scale(eps_tilde, 0.5 * g2 / sigma)), dt))
    raise ValueError(f"unknown solver kind {kind!r}; choose from {SOLVER_KINDS}")


def rollout_grid(index: int, k: int, max_steps: int | None = None) -> list[tuple[float, float]]:
    """(t_from, t_to) pairs walking the atom grid from index i down to 0.

    The full sub-grid uses every atom below i; ``max_steps`` thins it to
    at most that many evenly spaced solver steps (always ending at 0).
    """
    if not 1 <= index <= k:
        raise ValueError(f"rollout index must be in [1, {k}], got {index}")
    stops = list(range(index, -1, -1))
    if max_steps is not None and max_steps < index:
        picks = np.unique(np.round(np.linspace(index, 0, max_steps + 1)).astype(int))[::-1]
        stops = [int(j) for j in picks]
    return [(a / k, b / k) for a, b in zip(stops, stops[1:])]


def teacher_rollout(teacher, z_t, index: int, guidance: float, cond, sched: NoiseSchedule,
                    k: int, *, kind: str = "ddim", max_steps: int | None = None) -> Tensor:
    """Multi-step guided denoise of z_t (at t = index/K) down to a clean sample.

    Each step runs the teacher on both the conditional and the null branch
    and combines them with the guidance scale (2 denoiser passes per step).
    The result carries no gradient path: everything runs with recording off.
    """
    if guidance < 0:
        raise ValueError(f"guidance scale must be >= 0, got {guidance}")
    with no_grad():
        z = Tensor(z_t.data if isinstance(z_t, Tensor) else z_t)
        for t_from, t_to in rollout_grid(index, k, max_steps):
            eps_c = teacher(z, t_from, cond)
            eps_u = teacher(z, t_from, None)
            eps_tilde = cfg_combine(eps_c, eps_u, guidance)
            z = solver_step(z, eps_tilde, t_from, t_to, sched, kind)
    return z


def student_sample(student, n_steps: int, cond, rng: np.random.Generator,
                   sched: NoiseSchedule, k: int, n: int | None = None) -> np.ndarray:
    """Few-step generation: draw pure noise, then alternate one-step clean
    predictions with fresh re-noising down the inference grid. No guidance
    is applied; NFE equals n_steps."""
    from .nets import student_f

    grid = inference_grid(n_steps, k)
    if n is None:
        n = len(cond) if cond is not None else 1
    dim = student.data_dim
    with no_grad():
        z = Tensor(rng.standard_normal((n, dim)))
        x0 = None
        for step, t in enumerate(grid):
            x0 = student_f(student, z, t, cond, sched)
            if step + 1 < len(grid):
                eps = Tensor(rng.standard_normal((n, dim)))
                z = forward_diffuse(x0, grid[step + 1], eps, sched)
    return x0.data
