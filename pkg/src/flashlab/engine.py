"""Teacher pretraining and the few-step distillation loop.

One distillation iteration draws a batch, noises it at a phase-scheduled
timestep, rolls the frozen teacher down the atom grid with classifier-free
guidance to build the regression target, takes the student's one-step
prediction, and combines the distillation, adversarial and distribution-
matching objectives with the phase's weights. The discriminator takes its
own step on every iteration (from iteration 0, so it is warm before its
loss weight ramps in).

All randomness comes from one training stream in a fixed per-iteration
order -- batch, timestep, noise, guidance, adversarial draws (t', eps1-3),
matching draws (t'', eps) -- and is consumed even for disabled loss terms,
so a run can be checkpointed and resumed bit-exactly. Evaluation uses
separate streams derived from (seed, tag, iteration) and never touches the
training stream.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gradcore as gc
from .datametrics import ToyDataset, make_dataset, sliced_wasserstein
from .gradcore import AdamState, Tensor
from .losses import (
    DISTILL_KINDS,
    GAN_KINDS,
    LossWeights,
    RenoiseSpec,
    adversarial_losses,
    distill_loss,
    dmd_surrogate,
    total_loss,
)
from .nets import DenoiserNet, Discriminator, LoraDenoiser, attach_lora, student_f
from .sampling import SOLVER_KINDS, student_sample, teacher_rollout
from .schedule import NoiseSchedule, cosine_schedule, forward_diffuse
from .timesteps import PI_PRESETS, phase_lookup, preset_plan, sample_timestep

__all__ = [
    "DistillConfig",
    "RunState",
    "TeacherRun",
    "DistillResult",
    "DivergenceError",
    "train_teacher",
    "distill",
    "ablate",
    "ABLATION_AXES",
    "teacher_reference_samples",
    "evaluate_student",
    "config_id",
]

# rng stream tags (SeedSequence spawn keys)
_STREAM_TEACHER = 1
_STREAM_INIT = 2
_STREAM_TRAIN = 3
_STREAM_DATA_REF = 4
_STREAM_TEACHER_REF = 5
_STREAM_EVAL = 6
_STREAM_SW_PROJ = 7


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the last good state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class DistillConfig:
    """Full experiment description; every field has a desk-scale default."""

    # data (encoder is the identity: latents are the points themselves)
    dataset: str = "gaussians8"
    dataset_size: int = 2000

    # timestep distribution and phases
    k: int = 32
    pi_preset: str = "ours"
    shift_every: int = 5000
    lambda_adv_ramp: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3)
    lambda_dmd_ramp: tuple[float, ...] = (0.0, 0.3, 0.5, 0.7)

    # guidance
    omega_min: float = 1.0
    omega_max: float = 4.0
    omega_dmd: float | None = None  # None -> midpoint of [omega_min, omega_max]

    # optimization
    lr_student: float = 2e-4
    lr_disc: float = 2e-4
    batch_size: int = 32
    iterations: int = 20_000
    seed: int = 0

    # solver / rollout
    solver: str = "ddim"
    rollout_max_steps: int | None = None

    # losses
    distill_kind: str = "mse"
    gan_kind: str = "lsgan"
    dmd_normalize: bool = True
    t_prime_set: tuple[float, ...] = (0.01, 0.25, 0.5, 0.75)
    t_dprime_min: float = 0.02
    disc_condition: bool = True

    # networks (desk-scale trunks; DenoiserNet itself defaults to 256-wide)
    hidden: tuple[int, ...] = (96, 96, 96)
    cond_dim: int = 16
    lora_rank: int = 8
    lora_scale: float = 1.0
    disc_widths: tuple[int, ...] = (128, 128)

    # teacher pretraining
    teacher_iters: int = 30_000
    teacher_lr: float = 1e-3
    teacher_lr_final: float = 5e-5  # cosine decay target
    teacher_batch: int = 128
    p_drop: float = 0.1

    # eps<->x0 conversion clamp; None -> snap t=1 to the next atom (1 - 1/K)
    conversion_t_max: float | None = None

    # evaluation
    eval_every: int = 500
    eval_samples: int = 2000
    eval_nfes: tuple[int, ...] = (1, 2, 4)
    teacher_ref_steps: int = 16  # CFG solver steps -> 2x NFEs

    def __post_init__(self):
        if not 0.0 <= self.omega_min <= self.omega_max:
            raise ValueError("need 0 <= omega_min <= omega_max")
        if self.pi_preset not in PI_PRESETS:
            raise ValueError(f"unknown pi preset {self.pi_preset!r}; choose from {PI_PRESETS}")
        if self.solver not in SOLVER_KINDS:
            raise ValueError(f"unknown solver {self.solver!r}; choose from {SOLVER_KINDS}")
        if self.gan_kind not in GAN_KINDS:
            raise ValueError(f"unknown gan kind {self.gan_kind!r}; choose from {GAN_KINDS}")
        if self.distill_kind not in DISTILL_KINDS:
            raise ValueError(f"unknown distill kind {self.distill_kind!r}")
        last_start = (len(self.lambda_adv_ramp) - 1) * self.shift_every
        if self.iterations < last_start:
            raise ValueError(
                f"iterations ({self.iterations}) must reach the last phase start ({last_start})")
        if len(self.lambda_adv_ramp) != len(self.lambda_dmd_ramp):
            raise ValueError("lambda ramps must have equal length")

    def omega_dmd_value(self) -> float:
        if self.omega_dmd is not None:
            return self.omega_dmd
        return 0.5 * (self.omega_min + self.omega_max)

    def schedule(self) -> NoiseSchedule:
        clamp = self.conversion_t_max
        if clamp is None:
            clamp = 1.0 - 1.0 / self.k
        return cosine_schedule(conversion_t_max=clamp)

    def renoise(self) -> RenoiseSpec:
        return RenoiseSpec(tuple(self.t_prime_set), self.t_dprime_min)

    def adv_enabled(self) -> bool:
        return any(v > 0 for v in self.lambda_adv_ramp)

    def dmd_enabled(self) -> bool:
        return any(v > 0 for v in self.lambda_dmd_ramp)


def config_id(cfg: DistillConfig) -> str:
    import hashlib
    import json

    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:10]


def _stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *tags])))


@dataclass
class TeacherRun:
    net: DenoiserNet
    loss_history: list[tuple[int, float]]
    config: DistillConfig


@dataclass
class RunState:
    """Everything needed to continue a distillation run bit-exactly."""

    iteration: int
    student: LoraDenoiser
    disc: Discriminator
    adam_student: dict[str, AdamState]
    adam_disc: dict[str, AdamState]
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)
    last_eval_iter: int = -1


@dataclass
class DistillResult:
    state: RunState
    rows: list[dict]  # metrics rows incl. wall-clock, for CSV emission
    teacher: DenoiserNet
    config: DistillConfig


def _teacher_epsilon_loss(net, z0, t, eps, cond, sched) -> gc.Tensor:
    # per-sample squared norm, averaged over the batch (value ~ d at init)
    zt = forward_diffuse(z0, t, eps, sched)
    eps_hat = net(zt, t, cond)
    w = sched.loss_weight(t)[:, None]
    err = gc.mul(gc.square(gc.sub(eps_hat, Tensor(eps))), Tensor(w))
    return gc.scale(gc.tsum(err), 1.0 / z0.shape[0])


def train_teacher(cfg: DistillConfig, *, log_every: int = 200) -> TeacherRun:
    """Denoising-score-matching pretraining with condition dropping.

    Timesteps are uniform on (0, 1); the class id is replaced by the null
    token with probability p_drop so guidance has an unconditional branch.
    The learning rate follows a cosine decay from teacher_lr to
    teacher_lr_final, which buys most of the high-noise accuracy the
    rollout targets depend on.
    """
    sched = cfg.schedule()
    dataset = make_dataset(cfg.dataset)
    rng = _stream(cfg.seed, _STREAM_TEACHER)
    net = DenoiserNet(dataset.dim, dataset.n_classes, hidden=cfg.hidden,
                      cond_dim=cfg.cond_dim, rng=rng, name="teacher")
    states = gc.init_adam(net.params(), lr=cfg.teacher_lr)
    history: list[tuple[int, float]] = []
    for it in range(cfg.teacher_iters):
        lr = cfg.teacher_lr_final + 0.5 * (cfg.teacher_lr - cfg.teacher_lr_final) * (
            1.0 + np.cos(np.pi * it / cfg.teacher_iters))
        for st in states.values():
            st.lr = lr
        pts, cls = dataset.sample(rng, cfg.teacher_batch)
        t = rng.uniform(0.0, 1.0, size=cfg.teacher_batch)
        eps = rng.standard_normal(pts.shape)
        drop = rng.random(cfg.teacher_batch) < cfg.p_drop
        cond = np.where(drop, -1, cls)
        try:
            loss = _teacher_epsilon_loss(net, Tensor(pts), t, eps, cond, sched)
            gc.backprop(loss)
            gc.adam_step(net.params(), states)
        except (ValueError, FloatingPointError) as exc:
            raise DivergenceError(
                f"teacher training diverged at iteration {it}: {exc}") from exc
        if it % log_every == 0 or it == cfg.teacher_iters - 1:
            history.append((it, loss.item()))
    return TeacherRun(net=net, loss_history=history, config=cfg)


def teacher_reference_samples(teacher, cfg: DistillConfig, n: int, *,
                              solver_steps: int | None = None,
                              guidance: float | None = None,
                              rng: np.random.Generator | None = None,
                              sched: NoiseSchedule | None = None) -> np.ndarray:
    """Sample the teacher from pure noise with a thinned CFG rollout.

    NFE per sample is 2 * solver_steps (both guidance branches run)."""
    sched = sched or cfg.schedule()
    steps = solver_steps if solver_steps is not None else cfg.teacher_ref_steps
    omega = guidance if guidance is not None else cfg.omega_dmd_value()
    rng = rng if rng is not None else _stream(cfg.seed, _STREAM_TEACHER_REF)
    cls = rng.integers(0, teacher.n_classes, size=n)
    z = rng.standard_normal((n, teacher.data_dim))
    out = teacher_rollout(teacher, Tensor(z), cfg.k, omega, cls, sched, cfg.k,
                          kind=cfg.solver, max_steps=steps)
    return out.data


def evaluate_student(student, cfg: DistillConfig, data_ref: np.ndarray,
                     iteration: int, sched: NoiseSchedule) -> list[dict]:
    """Sliced-Wasserstein-to-data of few-step samples at each eval NFE."""
    rows = []
    for nfe in cfg.eval_nfes:
        rng = _stream(cfg.seed, _STREAM_EVAL, nfe, iteration)
        cls = rng.integers(0, student.n_classes, size=cfg.eval_samples)
        pts = student_sample(student, nfe, cls, rng, sched, cfg.k, n=cfg.eval_samples)
        sw = sliced_wasserstein(pts, data_ref, 128, _stream(cfg.seed, _STREAM_SW_PROJ))
        rows.append({"iter": iteration, "nfe": nfe, "metric": "sw", "value": sw})
    return rows


def _consume_adv_draws(rng, n, dim, n_tprime):
    # mirrors the draw order inside adversarial_losses
    rng.integers(0, n_tprime, size=n)
    for _ in range(3):
        rng.standard_normal((n, dim))


def _consume_dmd_draws(rng, n, dim, t_min):
    # mirrors the draw order inside dmd_surrogate
    rng.uniform(t_min, 1.0, size=n)
    rng.standard_normal((n, dim))


def distill(teacher: DenoiserNet, cfg: DistillConfig, *,
            resume_state: RunState | None = None,
            progress: bool = False) -> DistillResult:
    """Run (or continue) the distillation loop against a frozen teacher."""
    sched = cfg.schedule()
    dataset = make_dataset(cfg.dataset)
    if teacher.data_dim != dataset.dim or teacher.n_classes != dataset.n_classes:
        raise ValueError("teacher geometry does not match the configured dataset")
    teacher.freeze()
    plan = preset_plan(cfg.pi_preset, cfg.k, cfg.shift_every,
                       lambda_adv=cfg.lambda_adv_ramp, lambda_dmd=cfg.lambda_dmd_ramp)
    renoise = cfg.renoise()
    omega_dmd = cfg.omega_dmd_value()
    use_adv = cfg.adv_enabled()
    use_dmd = cfg.dmd_enabled()

    if resume_state is None:
        init_rng = _stream(cfg.seed, _STREAM_INIT)
        student = attach_lora(teacher, cfg.lora_rank, scale=cfg.lora_scale,
                              rng=init_rng, name="student")
        disc = Discriminator(teacher, widths=cfg.disc_widths, rng=init_rng,
                             condition_on_class=cfg.disc_condition)
        state = RunState(
            iteration=0,
            student=student,
            disc=disc,
            adam_student=gc.init_adam(student.trainable_params(), lr=cfg.lr_student),
            adam_disc=gc.init_adam(disc.trainable_params(), lr=cfg.lr_disc),
            rng=_stream(cfg.seed, _STREAM_TRAIN),
            history=[],
        )
    else:
        state = resume_state

    data_ref, _ = dataset.sample(_stream(cfg.seed, _STREAM_DATA_REF), cfg.dataset_size)
    ref_pts = teacher_reference_samples(teacher, cfg, cfg.eval_samples)
    sw_teacher = sliced_wasserstein(ref_pts, data_ref, 128, _stream(cfg.seed, _STREAM_SW_PROJ))
    teacher_nfe_ref = 2 * cfg.teacher_ref_steps

    rows: list[dict] = []
    cid = config_id(cfg)

    def emit(history_row: dict) -> None:
        state.history.append(history_row)
        rows.append({**history_row, "seed": cfg.seed, "config": cid,
                     "wallclock": time.time()})

    rng = state.rng
    student, disc = state.student, state.disc
    dim = dataset.dim

    while state.iteration <= cfg.iterations:
        it = state.iteration
        # the last_eval_iter guard keeps a resumed run from re-emitting the
        # eval rows its checkpoint already contains
        if (it % cfg.eval_every == 0 or it == cfg.iterations) and it > state.last_eval_iter:
            for row in evaluate_student(student, cfg, data_ref, it, sched):
                emit(row)
            emit({"iter": it, "nfe": teacher_nfe_ref, "metric": "sw_teacher",
                  "value": sw_teacher})
            state.last_eval_iter = it
        if it == cfg.iterations:
            break

        # fixed draw order: batch, (phase), timestep, noise, guidance,
        # adversarial draws, matching draws -- consumed even when disabled
        z0, cls = dataset.sample(rng, cfg.batch_size)
        dist, lam_adv, lam_dmd = phase_lookup(plan, it)
        index, t = sample_timestep(dist, rng)
        eps = rng.standard_normal(z0.shape)
        omega = rng.uniform(cfg.omega_min, cfg.omega_max)

        nfe_teacher_before = teacher.nfe
        nfe_student_before = student.nfe
        try:
            z_t = forward_diffuse(Tensor(z0), t, Tensor(eps), sched)
            target = teacher_rollout(teacher, z_t, index, omega, cls, sched, cfg.k,
                                     kind=cfg.solver, max_steps=cfg.rollout_max_steps)
            x0_pred = student_f(student, z_t, t, cls, sched)
            l_distill = distill_loss(x0_pred, target, cfg.distill_kind)

            if use_adv:
                l_adv, l_dis = adversarial_losses(disc, student, Tensor(z0), cls, sched,
                                                  rng, renoise, cfg.gan_kind)
            else:
                _consume_adv_draws(rng, cfg.batch_size, dim, len(renoise.t_prime_set))
                l_adv = l_dis = Tensor(np.asarray(0.0))

            if use_dmd:
                l_dmd = dmd_surrogate(student, teacher, x0_pred, cls, omega_dmd,
                                      sched, rng, renoise, normalize=cfg.dmd_normalize)
            else:
                _consume_dmd_draws(rng, cfg.batch_size, dim, renoise.t_dprime_min)
                l_dmd = Tensor(np.asarray(0.0))

            total = total_loss(l_distill, l_adv, l_dmd, LossWeights(lam_adv, lam_dmd))
            gc.backprop(total)
            gc.adam_step(student.trainable_params(), state.adam_student)
            if use_adv:
                gc.backprop(l_dis)
                gc.adam_step(disc.trainable_params(), state.adam_disc)
        except (ValueError, FloatingPointError) as exc:
            raise DivergenceError(
                f"distillation diverged at iteration {it}: {exc}", state=state) from exc

        # NFE budget: rollout (2 per solver step, both CFG branches) + student
        # prediction (1) + DMD teacher score (2, or 1 when unguided) +
        # adversarial student pass (1)
        steps = index if cfg.rollout_max_steps is None else min(index, cfg.rollout_max_steps)
        dmd_nfe = (2 if omega_dmd != 1.0 else 1) if use_dmd else 0
        budget = 2 * steps + 1 + dmd_nfe + (1 if use_adv else 0)
        teacher_delta = teacher.nfe - nfe_teacher_before
        student_delta = student.nfe - nfe_student_before
        assert teacher_delta == 2 * steps + dmd_nfe, (teacher_delta, steps, dmd_nfe)
        assert student_delta == 1 + (1 if use_adv else 0) + (1 if use_dmd else 0)

        if it % 100 == 0:
            emit({"iter": it, "nfe": budget, "metric": "loss_total",
                  "value": total.item()})
            emit({"iter": it, "nfe": budget, "metric": "loss_distill",
                  "value": l_distill.item()})
            emit({"iter": it, "nfe": budget, "metric": "lambda_adv", "value": lam_adv})
            emit({"iter": it, "nfe": budget, "metric": "lambda_dmd", "value": lam_dmd})
            if progress:
                print(f"[{cid}] iter {it:6d} total {total.item():.4f} "
                      f"distill {l_distill.item():.4f} nfe {budget}")
        state.iteration += 1

    return DistillResult(state=state, rows=rows, teacher=teacher, config=cfg)


ABLATION_AXES = ("losses", "pi", "distill", "gan", "k", "guidance")


def _axis_variants(cfg: DistillConfig, axis: str) -> list[tuple[str, DistillConfig]]:
    zeros = tuple(0.0 for _ in cfg.lambda_adv_ramp)
    if axis == "losses":
        return [
            ("distill", replace(cfg, lambda_adv_ramp=zeros, lambda_dmd_ramp=zeros)),
            ("distill+dmd", replace(cfg, lambda_adv_ramp=zeros)),
            ("distill+adv", replace(cfg, lambda_dmd_ramp=zeros)),
            ("distill+dmd+adv", cfg),
        ]
    if axis == "pi":
        return [(p, replace(cfg, pi_preset=p)) for p in ("uniform", "gaussian", "sharp", "ours")]
    if axis == "distill":
        return [(kind, replace(cfg, distill_kind=kind)) for kind in DISTILL_KINDS]
    if axis == "gan":
        return [(kind, replace(cfg, gan_kind=kind)) for kind in ("hinge", "wgan", "lsgan")]
    if axis == "k":
        return [(f"K={k}", replace(cfg, k=k)) for k in (16, 32, 64)]
    if axis == "guidance":
        fixed = [(f"omega={w}", replace(cfg, omega_min=float(w), omega_max=float(w)))
                 for w in (1, 3, 5, 7, 10, 13, 15)]
        return fixed + [(f"omega~U[{cfg.omega_min},{cfg.omega_max}]", cfg)]
    raise ValueError(f"unknown ablation axis {axis!r}; supported: {ABLATION_AXES}")


def ablate(cfg: DistillConfig, axis: str, *, teacher: DenoiserNet | None = None,
           seeds: tuple[int, ...] = (0, 1, 2), metric_nfe: int = 2,
           progress: bool = False) -> list[dict]:
    """Train one variant per axis value (x seeds) and tabulate the final
    few-step sliced-Wasserstein metric, mean +/- sd across seeds."""
    variants = _axis_variants(cfg, axis)
    if teacher is None:
        teacher = train_teacher(cfg).net
    table = []
    for v_idx, (label, vcfg) in enumerate(variants):
        finals = []
        for rep, seed in enumerate(seeds):
            run_cfg = replace(vcfg, seed=int(np.random.SeedSequence(
                [cfg.seed, v_idx, rep]).generate_state(1)[0] % 2**31))
            result = distill(teacher, run_cfg, progress=progress)
            final = [r for r in result.state.history
                     if r["metric"] == "sw" and r["nfe"] == metric_nfe][-1]
            finals.append(final["value"])
        table.append({
            "axis": axis,
            "variant": label,
            "config": config_id(vcfg),
            "seeds": len(seeds),
            "nfe": metric_nfe,
            "sw_mean": float(np.mean(finals)),
            "sw_sd": float(np.std(finals)),
            "sw_values": [float(v) for v in finals],
        })
    return table
