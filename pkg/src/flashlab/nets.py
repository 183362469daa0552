"""Conditional denoiser MLPs, LoRA students, and the feature-space discriminator.

The denoiser predicts the injected noise from (z_t, t, class). Time enters
through a fixed sinusoidal embedding, the class through a learned table
with a dedicated null row used for condition dropping. The student is the
teacher plus low-rank adapter deltas (zero at init, so the student starts
bit-identical to the teacher). The discriminator scores re-noised samples
through the frozen teacher's first hidden activations, an MLP-scale
analog of reusing a pretrained encoder as featurizer.
"""

from __future__ import annotations

import numpy as np

from . import gradcore as gc
from .gradcore import Param, Tensor
from .schedule import NoiseSchedule, eps_to_x0

__all__ = [
    "sinusoidal_time_embedding",
    "DenoiserNet",
    "LoraDenoiser",
    "attach_lora",
    "Discriminator",
    "student_f",
]

TIME_EMBED_DIM = 64
NULL_CLASS = -1  # public marker for "condition dropped"


def sinusoidal_time_embedding(t, n: int, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """(n, dim) sin/cos features at frequencies 2^k * pi, k = 0..dim/2-1."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n, float(t))
    if t.shape != (n,):
        raise ValueError(f"time shape {t.shape} does not match batch {n}")
    k = np.arange(dim // 2)
    ang = t[:, None] * (np.pi * (2.0**k))[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _one_hot(cond, n: int, n_classes: int) -> np.ndarray:
    """Rows of the (n_classes + 1)-wide indicator; None or -1 selects the null row."""
    out = np.zeros((n, n_classes + 1))
    if cond is None:
        out[:, n_classes] = 1.0
        return out
    cond = np.asarray(cond)
    if cond.ndim == 0:
        cond = np.full(n, int(cond))
    if cond.shape != (n,):
        raise ValueError(f"condition shape {cond.shape} does not match batch {n}")
    if np.any((cond != NULL_CLASS) & ((cond < 0) | (cond >= n_classes))):
        bad = cond[(cond != NULL_CLASS) & ((cond < 0) | (cond >= n_classes))]
        raise ValueError(f"unknown class id(s) {np.unique(bad)} (n_classes={n_classes})")
    idx = np.where(cond == NULL_CLASS, n_classes, cond)
    out[np.arange(n), idx] = 1.0
    return out


class DenoiserNet:
    """Noise-prediction MLP eps(z_t, t, c) with SiLU activations.

    Default trunk widths are [d_in + 64 + cond_dim, 256, 256, 256, d_in];
    the final layer is zero-initialized so a fresh net predicts zero noise.
    """

    def __init__(self, data_dim: int, n_classes: int, *, hidden=(256, 256, 256),
                 cond_dim: int = 16, rng: np.random.Generator, name: str = "net"):
        self.data_dim = data_dim
        self.n_classes = n_classes
        self.cond_dim = cond_dim
        self.hidden = tuple(hidden)
        self.name = name
        self.nfe = 0

        d_emb = TIME_EMBED_DIM + cond_dim
        widths = [data_dim + d_emb, *self.hidden, data_dim]
        self.weights: list[Param] = []
        self.biases: list[Param] = []
        for i, (d_in, d_out) in enumerate(zip(widths, widths[1:])):
            last = i == len(widths) - 2
            w = np.zeros((d_out, d_in)) if last else \
                rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in)
            self.weights.append(Param(w, f"{name}.w{i}"))
            self.biases.append(Param(np.zeros(d_out), f"{name}.b{i}"))
        self.embed = Param(rng.standard_normal((cond_dim, n_classes + 1)) * 0.1,
                           f"{name}.embed")

    def params(self) -> list[Param]:
        return [*self.weights, *self.biases, self.embed]

    def trainable_params(self) -> list[Param]:
        return [p for p in self.params() if p.requires_grad]

    def freeze(self) -> "DenoiserNet":
        for p in self.params():
            p.requires_grad = False
        return self

    def clone(self, name: str | None = None) -> "DenoiserNet":
        out = object.__new__(DenoiserNet)
        out.data_dim, out.n_classes = self.data_dim, self.n_classes
        out.cond_dim, out.hidden = self.cond_dim, self.hidden
        out.name = name or self.name
        out.nfe = 0
        out.weights = [Param(p.data.copy(), f"{out.name}.w{i}")
                       for i, p in enumerate(self.weights)]
        out.biases = [Param(p.data.copy(), f"{out.name}.b{i}")
                      for i, p in enumerate(self.biases)]
        out.embed = Param(self.embed.data.copy(), f"{out.name}.embed")
        return out

    def _input(self, z: Tensor, t, cond) -> Tensor:
        n = z.shape[0]
        temb = Tensor(sinusoidal_time_embedding(t, n))
        cemb = gc.affine(Tensor(_one_hot(cond, n, self.n_classes)), self.embed)
        return gc.concat([z, temb, cemb], axis=1)

    def _trunk(self, x: Tensor, n_layers: int | None = None) -> Tensor:
        layers = len(self.weights) if n_layers is None else n_layers
        h = x
        for i in range(layers):
            h = gc.affine(h, self.weights[i], self.biases[i])
            if i < len(self.weights) - 1:
                h = gc.silu(h)
        return h

    def forward(self, z, t, cond=None) -> Tensor:
        """Predicted noise, same shape as z. t may be scalar or per-sample."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.data.ndim != 2 or z.shape[1] != self.data_dim:
            raise ValueError(f"expected z of shape (n, {self.data_dim}), got {z.shape}")
        self.nfe += 1
        return self._trunk(self._input(z, t, cond))

    __call__ = forward

    def hidden_features(self, z, t, cond=None) -> Tensor:
        """Concatenated activations of the first two hidden layers (encoder analog)."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        x = self._input(z, t, cond)
        h1 = gc.silu(gc.affine(x, self.weights[0], self.biases[0]))
        h2 = gc.silu(gc.affine(h1, self.weights[1], self.biases[1]))
        return gc.concat([h1, h2], axis=1)

    def cond_embedding(self, cond, n: int) -> Tensor:
        return gc.affine(Tensor(_one_hot(cond, n, self.n_classes)), self.embed)


class LoraDenoiser:
    """Teacher weights plus trainable low-rank deltas and a trainable embedding.

    Effective layer weight is W + scale * B @ A with B zero-initialized,
    so the adapted net equals the teacher exactly at init. Base weights
    and biases are frozen copies; only A, B and the class embedding train.
    """

    def __init__(self, teacher: DenoiserNet, rank: int, *, scale: float = 1.0,
                 rng: np.random.Generator, name: str = "student"):
        fan_ins = [w.shape[1] for w in teacher.weights]
        if rank < 1 or rank > min(fan_ins):
            raise ValueError(f"rank {rank} outside [1, {min(fan_ins)}] for widths {fan_ins}")
        self.base = teacher.clone(f"{name}.base").freeze()
        self.rank = rank
        self.scale = float(scale)
        self.name = name
        self.data_dim = teacher.data_dim
        self.n_classes = teacher.n_classes
        self.nfe = 0
        self.lora_a: list[Param] = []
        self.lora_b: list[Param] = []
        for i, w in enumerate(self.base.weights):
            d_out, d_in = w.shape
            self.lora_a.append(Param(rng.standard_normal((rank, d_in)) / np.sqrt(d_in),
                                     f"{name}.a{i}"))
            self.lora_b.append(Param(np.zeros((d_out, rank)), f"{name}.b{i}"))
        self.embed = Param(self.base.embed.data.copy(), f"{name}.embed")

    def params(self) -> list[Param]:
        return [*self.base.weights, *self.base.biases,
                *self.lora_a, *self.lora_b, self.embed]

    def trainable_params(self) -> list[Param]:
        return [*self.lora_a, *self.lora_b, self.embed]

    def n_trainable(self) -> int:
        return sum(p.size for p in self.trainable_params())

    def forward(self, z, t, cond=None) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.data.ndim != 2 or z.shape[1] != self.data_dim:
            raise ValueError(f"expected z of shape (n, {self.data_dim}), got {z.shape}")
        self.nfe += 1
        n = z.shape[0]
        temb = Tensor(sinusoidal_time_embedding(t, n))
        cemb = gc.affine(Tensor(_one_hot(cond, n, self.n_classes)), self.embed)
        h = gc.concat([z, temb, cemb], axis=1)
        last = len(self.base.weights) - 1
        for i, (w, b) in enumerate(zip(self.base.weights, self.base.biases)):
            delta = gc.affine(gc.affine(h, self.lora_a[i]), self.lora_b[i])
            h = gc.add(gc.affine(h, w, b), gc.scale(delta, self.scale))
            if i < last:
                h = gc.silu(h)
        return h

    __call__ = forward

    def merged(self, name: str | None = None) -> DenoiserNet:
        """Materialize W + scale * B @ A into a plain net (for equivalence checks)."""
        out = self.base.clone(name or f"{self.name}.merged")
        for i, w in enumerate(out.weights):
            w.data += self.scale * (self.lora_b[i].data @ self.lora_a[i].data)
        out.embed.data[...] = self.embed.data
        for p in out.params():
            p.requires_grad = False
        return out


def attach_lora(teacher: DenoiserNet, rank: int, *, scale: float = 1.0,
                rng: np.random.Generator, name: str = "student") -> LoraDenoiser:
    """Student = frozen teacher copy + rank-r adapters, equal to the teacher at init."""
    return LoraDenoiser(teacher, rank, scale=scale, rng=rng, name=name)


def student_f(net, z_t, t, cond, sched: NoiseSchedule) -> Tensor:
    """One-step clean-sample prediction: invert the forward process at the
    predicted noise, with the conversion-side clamp at t=1."""
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    return eps_to_x0(z_t, net(z_t, t, cond), t, sched, clamp=True)


class Discriminator:
    """Real/fake score head over frozen-teacher features of re-noised samples.

    Input is [teacher hidden features; time embedding; teacher class
    embedding]; the head is an MLP with SiLU and a zero-initialized final
    layer (fresh discriminators output exactly 0). Scores are unbounded
    reals for least-squares targets. The featurizer is a frozen clone, so
    no gradient can ever reach the live teacher.
    """

    def __init__(self, teacher: DenoiserNet, *, widths=(128, 128),
                 rng: np.random.Generator, condition_on_class: bool = True,
                 name: str = "disc"):
        self.featurizer = teacher.clone(f"{name}.feat").freeze()
        self.condition_on_class = condition_on_class
        self.name = name
        feat_dim = sum(teacher.hidden[:2]) + TIME_EMBED_DIM + teacher.cond_dim
        dims = [feat_dim, *widths, 1]
        self.weights: list[Param] = []
        self.biases: list[Param] = []
        for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
            last = i == len(dims) - 2
            w = np.zeros((d_out, d_in)) if last else \
                rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in)
            self.weights.append(Param(w, f"{name}.w{i}"))
            self.biases.append(Param(np.zeros(d_out), f"{name}.b{i}"))

    def params(self) -> list[Param]:
        return [*self.weights, *self.biases]

    def trainable_params(self) -> list[Param]:
        return [p for p in self.params() if p.requires_grad]

    def forward(self, z, t, cond=None) -> Tensor:
        """(n, 1) scores for samples re-noised at time(s) t."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        n = z.shape[0]
        if not self.condition_on_class:
            cond = None
        feats = self.featurizer.hidden_features(z, t, cond)
        temb = Tensor(sinusoidal_time_embedding(t, n))
        cemb = self.featurizer.cond_embedding(cond, n)
        h = gc.concat([feats, temb, cemb], axis=1)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = gc.affine(h, w, b)
            if i < len(self.weights) - 1:
                h = gc.silu(h)
        return h

    __call__ = forward
