"""Discrete timestep distribution over K atoms and its training phase plan.

The sampler is a mixture of narrow Gaussians centred on the atoms
mu_i = i/K, i = 1..K, weighted by betas and evaluated at the atoms
themselves, then renormalized (the density prefactor cancels). The kernel
is narrow enough that probabilities essentially follow the betas; the
spread to more than the four inference anchors comes from an explicit
floor weight on the remaining atoms.

A phase plan re-weights the anchors over training: a low-noise warm-up,
then a progressive shift of mass toward t=1 while the adversarial and
distribution-matching loss weights ramp up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimestepDistribution",
    "Phase",
    "PhasePlan",
    "build_pi",
    "anchor_indices",
    "betas_from_anchors",
    "sample_timestep",
    "phase_lookup",
    "inference_grid",
    "default_phase_plan",
    "preset_distribution",
    "preset_plan",
    "PI_PRESETS",
    "DEFAULT_LAMBDA_ADV",
    "DEFAULT_LAMBDA_DMD",
    "DEFAULT_BETA_FLOOR",
]

# lambda ramps across warm-up + 3 phases
DEFAULT_LAMBDA_ADV = (0.0, 0.1, 0.2, 0.3)
DEFAULT_LAMBDA_DMD = (0.0, 0.3, 0.5, 0.7)
# anchor betas per phase, ordered (t=K/4, K/2, 3K/4, K)/K
DEFAULT_ANCHOR_BETAS = (
    (0.5, 0.5, 0.0, 0.0),
    (0.3, 0.3, 0.3, 0.1),
    (0.25, 0.25, 0.25, 0.25),
    (0.2, 0.2, 0.2, 0.4),
)
DEFAULT_BETA_FLOOR = 0.01

PI_PRESETS = ("ours", "uniform", "gaussian", "sharp")


def _default_sigma_mix(k: int) -> float:
    # narrow kernel: adjacent atoms get exp(-K^2) relative mass, so the
    # renormalized probabilities track the betas themselves
    return math.sqrt(0.5) / (k * k)


@dataclass(frozen=True)
class TimestepDistribution:
    """Categorical distribution over the K atoms t = i/K, i = 1..K."""

    k: int
    betas: np.ndarray
    sigma_mix: float
    atoms: np.ndarray = field(repr=False)
    probs: np.ndarray = field(repr=False)

    def prob_of_atom(self, index: int) -> float:
        """Probability of atom i (1-based)."""
        return float(self.probs[index - 1])


def anchor_indices(k: int) -> tuple[int, int, int, int]:
    """The four over-sampled inference atoms (1-based): K/4, K/2, 3K/4, K."""
    if k < 4 or k % 4 != 0:
        raise ValueError(f"K must be a multiple of 4 and >= 4, got {k}")
    return (k // 4, k // 2, 3 * k // 4, k)


def betas_from_anchors(k: int, anchor_betas, floor: float = 0.0) -> np.ndarray:
    """Expand 4 anchor weights (+ a floor on every other atom) to length K."""
    anchor_betas = np.asarray(anchor_betas, dtype=np.float64)
    if anchor_betas.shape != (4,) or np.any(anchor_betas < 0):
        raise ValueError("anchor_betas must be 4 non-negative reals")
    if floor < 0:
        raise ValueError("beta floor must be non-negative")
    betas = np.full(k, floor, dtype=np.float64)
    for pos, b in zip(anchor_indices(k), anchor_betas):
        betas[pos - 1] = b
    return betas


def build_pi(k: int, betas, sigma_mix: float | None = None) -> TimestepDistribution:
    """Evaluate the beta-weighted Gaussian mixture at every atom and renormalize."""
    if k < 4 or k % 4 != 0:
        raise ValueError(f"K must be a multiple of 4 and >= 4, got {k}")
    betas = np.asarray(betas, dtype=np.float64).copy()
    if betas.shape != (k,):
        raise ValueError(f"betas must have shape ({k},), got {betas.shape}")
    if np.any(betas < 0):
        raise ValueError("betas must be non-negative")
    if not np.any(betas > 0):
        raise ValueError("at least one beta must be positive")
    if sigma_mix is None:
        sigma_mix = _default_sigma_mix(k)
    if sigma_mix <= 0:
        raise ValueError("sigma_mix must be positive")

    atoms = np.arange(1, k + 1, dtype=np.float64) / k
    sq = (atoms[:, None] - atoms[None, :]) ** 2
    with np.errstate(under="ignore"):
        density = np.exp(-sq / (2.0 * sigma_mix**2)) @ betas
    total = density.sum()
    if total <= 0:
        raise ValueError("mixture density vanished at every atom")
    probs = density / total
    betas.setflags(write=False)
    atoms.setflags(write=False)
    probs.setflags(write=False)
    return TimestepDistribution(k=k, betas=betas, sigma_mix=float(sigma_mix),
                                atoms=atoms, probs=probs)


def sample_timestep(dist: TimestepDistribution, rng: np.random.Generator) -> tuple[int, float]:
    """Draw an atom; returns (1-based index i, t = i/K)."""
    pos = int(rng.choice(dist.k, p=dist.probs))
    return pos + 1, float(dist.atoms[pos])


@dataclass(frozen=True)
class Phase:
    start_iter: int
    anchor_betas: tuple[float, float, float, float]
    lambda_adv: float
    lambda_dmd: float
    beta_floor: float = 0.0


@dataclass(frozen=True)
class PhasePlan:
    phases: tuple[Phase, ...]
    k: int
    sigma_mix: float | None = None

    def __post_init__(self):
        if not self.phases:
            raise ValueError("phase plan must contain at least one phase")
        starts = [p.start_iter for p in self.phases]
        if starts[0] != 0:
            raise ValueError("first phase must start at iteration 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("phase start iterations must be strictly increasing")
        masses = [p.anchor_betas[3] for p in self.phases]
        if any(b < a for a, b in zip(masses, masses[1:])):
            raise ValueError("anchor-K (t=1) beta must be non-decreasing across phases")
        object.__setattr__(self, "_dists", tuple(
            build_pi(self.k, betas_from_anchors(self.k, p.anchor_betas, p.beta_floor),
                     self.sigma_mix)
            for p in self.phases
        ))


def phase_lookup(plan: PhasePlan, iteration: int) -> tuple[TimestepDistribution, float, float]:
    """Configuration of the latest phase with start_iter <= iteration (left-closed)."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    idx = 0
    for j, phase in enumerate(plan.phases):
        if phase.start_iter <= iteration:
            idx = j
        else:
            break
    phase = plan.phases[idx]
    return plan._dists[idx], phase.lambda_adv, phase.lambda_dmd


def inference_grid(n_steps: int, k: int) -> list[float]:
    """Descending timesteps the student is evaluated at for 1/2/4-step sampling."""
    if k % 4 != 0:
        raise ValueError(f"K must be divisible by 4, got {k}")
    grids = {1: [1.0], 2: [1.0, 0.5], 4: [1.0, 0.75, 0.5, 0.25]}
    if n_steps not in grids:
        raise ValueError(f"unsupported step count {n_steps}; choose from {sorted(grids)}")
    return grids[n_steps]


def default_phase_plan(k: int, shift_every: int = 5000, *,
                       lambda_adv=DEFAULT_LAMBDA_ADV,
                       lambda_dmd=DEFAULT_LAMBDA_DMD,
                       anchor_betas=DEFAULT_ANCHOR_BETAS,
                       beta_floor: float = DEFAULT_BETA_FLOOR,
                       sigma_mix: float | None = None) -> PhasePlan:
    """Warm-up plus three phases shifting mass toward full noise.

    The warm-up samples only the two low-noise anchors (no floor); later
    phases keep a small floor on non-anchor atoms so more than four
    distinct timesteps are seen.
    """
    if len(anchor_betas) != len(lambda_adv) or len(anchor_betas) != len(lambda_dmd):
        raise ValueError("anchor_betas and lambda ramps must have equal length")
    phases = tuple(
        Phase(start_iter=i * shift_every,
              anchor_betas=tuple(anchor_betas[i]),
              lambda_adv=float(lambda_adv[i]),
              lambda_dmd=float(lambda_dmd[i]),
              beta_floor=0.0 if i == 0 else beta_floor)
        for i in range(len(anchor_betas))
    )
    return PhasePlan(phases=phases, k=k, sigma_mix=sigma_mix)


def preset_distribution(name: str, k: int, sigma_mix: float | None = None) -> TimestepDistribution:
    """Single named distribution: warm-up / phase1..3 / uniform / gaussian / sharp."""
    name = name.lower()
    if name == "warmup":
        betas = betas_from_anchors(k, DEFAULT_ANCHOR_BETAS[0], 0.0)
    elif name in ("phase1", "phase2", "phase3"):
        idx = int(name[-1])
        betas = betas_from_anchors(k, DEFAULT_ANCHOR_BETAS[idx], DEFAULT_BETA_FLOOR)
    elif name == "uniform":
        betas = np.full(k, 1.0 / k)
    elif name == "gaussian":
        atoms = np.arange(1, k + 1) / k
        betas = np.exp(-((atoms - 0.5) ** 2) / (2 * 0.2**2))
    elif name == "sharp":
        betas = betas_from_anchors(k, DEFAULT_ANCHOR_BETAS[3], 0.0)
    else:
        raise ValueError(f"unknown timestep preset {name!r}")
    return build_pi(k, betas, sigma_mix)


def preset_plan(name: str, k: int, shift_every: int = 5000, *,
                lambda_adv=DEFAULT_LAMBDA_ADV,
                lambda_dmd=DEFAULT_LAMBDA_DMD) -> PhasePlan:
    """Phase plan for a named pi variant of the ablation harness.

    "ours" and "sharp" shift anchors per the default plan (sharp drops the
    non-anchor floor so exactly 4 atoms are sampled); "uniform" and
    "gaussian" keep a constant distribution while the lambda ramps still
    apply.
    """
    name = name.lower()
    if name == "ours":
        return default_phase_plan(k, shift_every, lambda_adv=lambda_adv, lambda_dmd=lambda_dmd)
    if name == "sharp":
        return default_phase_plan(k, shift_every, lambda_adv=lambda_adv, lambda_dmd=lambda_dmd,
                                  beta_floor=0.0)
    if name in ("uniform", "gaussian"):
        ref = preset_distribution(name, k)
        anchors = anchor_indices(k)
        # constant-shape plan: carry the preset's betas through every phase
        phases = []
        for i in range(len(lambda_adv)):
            phases.append(Phase(
                start_iter=i * shift_every,
                anchor_betas=tuple(float(ref.betas[a - 1]) for a in anchors),
                lambda_adv=float(lambda_adv[i]),
                lambda_dmd=float(lambda_dmd[i]),
                beta_floor=0.0,
            ))
        plan = PhasePlan(phases=tuple(phases), k=k)
        # replace the anchor-expanded dists with the exact preset shape
        object.__setattr__(plan, "_dists", tuple(ref for _ in phases))
        return plan
    raise ValueError(f"unknown pi preset {name!r}; choose from {PI_PRESETS}")
