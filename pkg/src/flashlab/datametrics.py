"""Synthetic conditional 2-d datasets, distribution metrics, and the
closed-form Gaussian oracle used to verify schedules, solvers and rollouts.

Every dataset draws i.i.d. from a fixed generative law, so per-class
marginals are stationary across draws. The Gaussian oracle supplies the
exact noise prediction implied by a Gaussian data distribution, which ties
the denoising objective's minimizer, the score relation and the ODE
solvers together in oracle-driven end-to-end tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcore import Tensor
from .schedule import NoiseSchedule

__all__ = [
    "ToyDataset",
    "make_dataset",
    "DATASET_KINDS",
    "GaussianOracle",
    "OracleEpsNet",
    "oracle_eps_star",
    "mmd",
    "sliced_wasserstein",
]

DATASET_KINDS = ("gaussians8", "two_moons", "checkerboard", "spiral", "gaussian")


@dataclass(frozen=True)
class ToyDataset:
    kind: str
    dim: int
    n_classes: int
    _sampler: object

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw n points and their class ids from the generative law."""
        points, classes = self._sampler(rng, n)
        return points.astype(np.float64), classes.astype(np.int64)


def _gaussians8(rng, n):
    angles = 2.0 * np.pi * np.arange(8) / 8.0
    centers = 4.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    cls = rng.integers(0, 8, size=n)
    pts = centers[cls] + 0.3 * rng.standard_normal((n, 2))
    return pts, cls


def _two_moons(rng, n):
    cls = rng.integers(0, 2, size=n)
    theta = np.pi * rng.random(n)
    x = np.where(cls == 0, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(cls == 0, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x, y], axis=1) * 2.0 + 0.1 * rng.standard_normal((n, 2))
    return pts, cls


def _checkerboard(rng, n):
    # 8 active cells of a 4x4 board on [-4, 4]^2; class id = active-cell index
    cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
    cls = rng.integers(0, 8, size=n)
    corners = np.array([cells[c] for c in cls], dtype=np.float64) * 2.0 - 4.0
    pts = corners + 2.0 * rng.random((n, 2))
    return pts, cls


def _spiral(rng, n):
    cls = rng.integers(0, 2, size=n)
    r = 4.0 * np.sqrt(rng.random(n))
    theta = 1.5 * np.pi * r / 4.0 + np.pi * cls
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    pts += 0.15 * rng.standard_normal((n, 2))
    return pts, cls


def make_dataset(kind: str, *, mean=None, cov=None) -> ToyDataset:
    kind = kind.lower()
    if kind == "gaussians8":
        return ToyDataset("gaussians8", 2, 8, _gaussians8)
    if kind == "two_moons":
        return ToyDataset("two_moons", 2, 2, _two_moons)
    if kind == "checkerboard":
        return ToyDataset("checkerboard", 2, 8, _checkerboard)
    if kind == "spiral":
        return ToyDataset("spiral", 2, 2, _spiral)
    if kind == "gaussian":
        oracle = GaussianOracle(
            m=np.zeros(2) if mean is None else np.asarray(mean, dtype=np.float64),
            s=np.eye(2) if cov is None else np.asarray(cov, dtype=np.float64),
        )

        def sampler(rng, n):
            return oracle.sample(rng, n), np.zeros(n, dtype=np.int64)

        return ToyDataset("gaussian", oracle.m.size, 1, sampler)
    raise ValueError(f"unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")


class GaussianOracle:
    """Analytic N(m, S) data distribution with its exact denoiser."""

    def __init__(self, m, s):
        self.m = np.asarray(m, dtype=np.float64)
        self.s = np.asarray(s, dtype=np.float64)
        if self.s.shape != (self.m.size, self.m.size):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(self.s, self.s.T):
            raise ValueError("covariance must be symmetric")
        try:
            self._chol = np.linalg.cholesky(self.s)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.m + rng.standard_normal((n, self.m.size)) @ self._chol.T

    def marginal_cov(self, t: float, sched: NoiseSchedule) -> np.ndarray:
        a, s = float(sched.alpha(t)), float(sched.sigma(t))
        return a * a * self.s + s * s * np.eye(self.m.size)

    def log_density_t(self, x, t: float, sched: NoiseSchedule) -> np.ndarray:
        """Log density of the diffused marginal N(alpha m, alpha^2 S + sigma^2 I)."""
        x = np.asarray(x, dtype=np.float64)
        cov = self.marginal_cov(t, sched)
        diff = x - float(sched.alpha(t)) * self.m
        sol = np.linalg.solve(cov, diff.T).T
        _, logdet = np.linalg.slogdet(cov)
        d = self.m.size
        return -0.5 * ((diff * sol).sum(axis=1) + logdet + d * np.log(2 * np.pi))


def oracle_eps_star(x_t, t, oracle: GaussianOracle, sched: NoiseSchedule) -> Tensor:
    """Exact noise prediction for Gaussian data: sigma(t) * (a^2 S + s^2 I)^-1 (x - a m)."""
    t = float(t)
    if not 0.0 < t <= 1.0:
        raise ValueError(f"oracle_eps_star needs t in (0, 1], got {t}")
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    a, s = float(sched.alpha(t)), float(sched.sigma(t))
    cov = oracle.marginal_cov(t, sched)
    diff = x - a * oracle.m
    return Tensor(s * np.linalg.solve(cov, diff.T).T)


class OracleEpsNet:
    """Callable with the denoiser interface, backed by the exact Gaussian oracle."""

    def __init__(self, oracle: GaussianOracle, sched: NoiseSchedule):
        self.oracle = oracle
        self.sched = sched
        self.data_dim = oracle.m.size
        self.nfe = 0

    def __call__(self, z, t, cond=None) -> Tensor:
        self.nfe += 1
        return oracle_eps_star(z, t, self.oracle, self.sched)


def mmd(x, y, bandwidth: float = 1.0, *, biased: bool = False) -> float:
    """Squared maximum mean discrepancy under an RBF kernel.

    The unbiased estimator (default) excludes diagonal terms and may dip
    slightly below zero on identical sets; the biased variant is exactly
    zero there.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"mmd needs 2-d sample sets of equal dimension, got {x.shape}, {y.shape}")
    if len(x) < 2 or len(y) < 2:
        raise ValueError("mmd needs at least 2 samples per set")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")

    def gram(a, b):
        sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-sq / (2.0 * bandwidth**2))

    kxx, kyy, kxy = gram(x, x), gram(y, y), gram(x, y)
    n, m = len(x), len(y)
    if biased:
        return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def sliced_wasserstein(x, y, n_proj: int = 128, rng: np.random.Generator | None = None) -> float:
    """Mean 1-d W2 distance between projections onto random unit directions.

    Equal-size sets pair sorted samples directly; unequal sizes compare
    interpolated quantile functions on a common grid.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"sliced_wasserstein needs equal-dimension sets, got {x.shape}, {y.shape}")
    if n_proj < 1:
        raise ValueError("n_proj must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    dim = x.shape[1]
    dirs = rng.standard_normal((n_proj, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px = np.sort(x @ dirs.T, axis=0)
    py = np.sort(y @ dirs.T, axis=0)
    if len(x) != len(y):
        q = (np.arange(max(len(x), len(y))) + 0.5) / max(len(x), len(y))
        px = np.stack([np.interp(q, (np.arange(len(x)) + 0.5) / len(x), px[:, j])
                       for j in range(n_proj)], axis=1)
        py = np.stack([np.interp(q, (np.arange(len(y)) + 0.5) / len(y), py[:, j])
                       for j in range(n_proj)], axis=1)
    w2 = np.sqrt(((px - py) ** 2).mean(axis=0))
    return float(w2.mean())
