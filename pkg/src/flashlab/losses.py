"""Training objectives: distillation MSE, adversarial pair, distribution
matching surrogate, and their weighted total.

Gradient routing is strict: the adversarial generator loss is built with
the discriminator's parameters frozen, the discriminator loss sees a
detached fake, and the distribution-matching surrogate re-attaches its
gradient only through an inner product with the student prediction, so the
score networks themselves contribute no parameter gradients. The random
draws of one evaluation happen in a fixed documented order (t', eps1,
eps2, eps3, then t'', eps_dmd) so training runs replay exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .nets import student_f
from .schedule import NoiseSchedule, forward_diffuse, score_from_eps
from .sampling import cfg_combine

__all__ = [
    "LossWeights",
    "RenoiseSpec",
    "GAN_KINDS",
    "DISTILL_KINDS",
    "distill_loss",
    "adversarial_losses",
    "dmd_surrogate",
    "total_loss",
]

GAN_KINDS = ("lsgan", "hinge", "wgan")
DISTILL_KINDS = ("mse",)


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float
    lambda_dmd: float

    def __post_init__(self):
        if not (np.isfinite(self.lambda_adv) and np.isfinite(self.lambda_dmd)):
            raise ValueError("loss weights must be finite")
        if self.lambda_adv < 0 or self.lambda_dmd < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class RenoiseSpec:
    """Re-noising times: a discrete set for the adversarial pass (t') and a
    uniform law on [t_min, 1] for the distribution-matching pass (t'')."""

    t_prime_set: tuple[float, ...] = (0.01, 0.25, 0.5, 0.75)
    t_dprime_min: float = 0.02

    def __post_init__(self):
        if not self.t_prime_set or any(not 0.0 < t < 1.0 for t in self.t_prime_set):
            raise ValueError("t_prime_set entries must lie in (0, 1)")
        if not 0.0 < self.t_dprime_min < 1.0:
            raise ValueError("t_dprime_min must lie in (0, 1)")


def distill_loss(x0_student: Tensor, x0_teacher: Tensor, kind: str = "mse") -> Tensor:
    """Mean squared error between the student's one-step prediction and the
    (detached) multi-step teacher target."""
    if kind not in DISTILL_KINDS:
        raise ValueError(f"unknown distillation loss {kind!r}; choose from {DISTILL_KINDS}")
    if x0_student.shape != x0_teacher.shape:
        raise ValueError(f"shape mismatch {x0_student.shape} vs {x0_teacher.shape}")
    return gc.tmean(gc.square(gc.sub(x0_student, x0_teacher)))


def _relu(x: Tensor) -> Tensor:
    # mask computed from data, so the gradient is the a.e. relu derivative
    return gc.mul(x, Tensor((x.data > 0).astype(np.float64)))


def _freeze_params(obj):
    params = obj.params() if hasattr(obj, "params") else []
    saved = [(p, p.requires_grad) for p in params]
    for p in params:
        p.requires_grad = False
    return saved


def _restore_params(saved):
    for p, flag in saved:
        p.requires_grad = flag


def adversarial_losses(disc, student, z0, cond, sched: NoiseSchedule,
                       rng: np.random.Generator, renoise: RenoiseSpec,
                       kind: str = "lsgan") -> tuple[Tensor, Tensor]:
    """Generator and discriminator losses on re-noised real/fake pairs.

    Per sample one t' is drawn from the discrete set; the fake path noises
    z0 at t', maps it through the student's one-step prediction and
    re-noises with fresh noise; the real path re-noises z0 at the same t'
    with independent noise. Returns (L_adv, L_dis): L_adv carries gradient
    only to the student (disc frozen during its construction), L_dis only
    to the discriminator (fake detached inside).
    """
    if kind not in GAN_KINDS:
        raise ValueError(f"unknown GAN loss {kind!r}; choose from {GAN_KINDS}")
    z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
    n = z0.shape[0]
    if n == 0:
        raise ValueError("adversarial_losses needs a non-empty batch")

    t_set = np.asarray(renoise.t_prime_set)
    t_prime = t_set[rng.integers(0, len(t_set), size=n)]
    eps1 = rng.standard_normal(z0.shape)
    eps2 = rng.standard_normal(z0.shape)
    eps3 = rng.standard_normal(z0.shape)

    z_tp = forward_diffuse(gc.stop_gradient(z0), t_prime, Tensor(eps1), sched)
    x0_fake = student_f(student, z_tp, t_prime, cond, sched)
    fake = forward_diffuse(x0_fake, t_prime, Tensor(eps2), sched)
    real = forward_diffuse(gc.stop_gradient(z0), t_prime, Tensor(eps3), sched)

    saved = _freeze_params(disc)
    try:
        d_fake_gen = disc(fake, t_prime, cond)
    finally:
        _restore_params(saved)
    d_real = disc(real, t_prime, cond)
    d_fake_det = disc(gc.stop_gradient(fake), t_prime, cond)

    if kind == "lsgan":
        l_adv = gc.scale(gc.tmean(gc.square(gc.sub(d_fake_gen, 1.0))), 0.5)
        l_dis = gc.scale(gc.add(gc.tmean(gc.square(gc.sub(d_real, 1.0))),
                                gc.tmean(gc.square(d_fake_det))), 0.5)
    elif kind == "hinge":
        l_adv = gc.scale(gc.tmean(d_fake_gen), -1.0)
        l_dis = gc.add(gc.tmean(_relu(gc.sub(1.0, d_real))),
                       gc.tmean(_relu(gc.add(d_fake_det, 1.0))))
    else:  # wgan (no Lipschitz regularizer; ablation harness only)
        l_adv = gc.scale(gc.tmean(d_fake_gen), -1.0)
        l_dis = gc.sub(gc.tmean(d_fake_det), gc.tmean(d_real))
    return l_adv, l_dis


def dmd_surrogate(student, teacher, x0_pred: Tensor, cond, guidance_dmd: float,
                  sched: NoiseSchedule, rng: np.random.Generator,
                  renoise: RenoiseSpec, *, normalize: bool = True,
                  return_delta: bool = False):
    """Scalar surrogate whose gradient is the distribution-matching signal.

    The student prediction is re-noised (detached) at t'' ~ U[t_min, 1];
    teacher and student noise predictions at that point give the two score
    estimates. Their difference Delta is detached and re-attached through
    mean_b <Delta_b, x0_pred_b>, so d(loss)/d(x0_pred) = Delta / batch and
    no gradient flows into either score network. ``normalize`` rescales
    Delta per sample by its mean absolute value (stability aid).
    """
    if guidance_dmd < 0:
        raise ValueError(f"guidance scale must be >= 0, got {guidance_dmd}")
    n = x0_pred.shape[0]
    t_dp = rng.uniform(renoise.t_dprime_min, 1.0, size=n)
    eps = rng.standard_normal(x0_pred.shape)

    with gc.no_grad():
        y = forward_diffuse(gc.stop_gradient(x0_pred), t_dp, Tensor(eps), sched)
        eps_c = teacher(y, t_dp, cond)
        if guidance_dmd == 1.0:
            eps_teacher = eps_c
        else:
            eps_teacher = cfg_combine(eps_c, teacher(y, t_dp, None), guidance_dmd)
        s_teacher = score_from_eps(eps_teacher, t_dp, sched)
        s_student = score_from_eps(student(y, t_dp, cond), t_dp, sched)
        delta = s_student.data - s_teacher.data
        if normalize:
            delta = delta / (np.abs(delta).mean(axis=1, keepdims=True) + 1e-8)

    loss = gc.scale(gc.tsum(gc.mul(x0_pred, Tensor(delta))), 1.0 / n)
    if return_delta:
        return loss, delta
    return loss


def _term_value(term, name: str) -> float:
    val = term.item() if isinstance(term, Tensor) else float(term)
    if not np.isfinite(val):
        raise FloatingPointError(f"non-finite {name} loss: {val}")
    return val


def total_loss(distill, adv, dmd, weights: LossWeights) -> Tensor:
    """distill + lambda_adv * adv + lambda_dmd * dmd, rejecting non-finite terms."""
    for term, name in ((distill, "distill"), (adv, "adversarial"), (dmd, "dmd")):
        _term_value(term, name)
    distill = distill if isinstance(distill, Tensor) else Tensor(distill)
    adv = adv if isinstance(adv, Tensor) else Tensor(adv)
    dmd = dmd if isinstance(dmd, Tensor) else Tensor(dmd)
    return gc.add(distill, gc.add(gc.scale(adv, weights.lambda_adv),
                                  gc.scale(dmd, weights.lambda_dmd)))
