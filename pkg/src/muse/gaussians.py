"""Closed-form algebra over diagonal Gaussians.

Distributions are parameterized by mean and log-variance, either as plain
arrays or as autodiff Tensors; every operation here is differentiable when
fed Tensors. KL-style reductions sum over the last (coordinate) axis, so a
batch of distributions of shape (B, D) yields per-sample values of shape (B,).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

__all__ = [
    "DiagGaussian",
    "standard_normal",
    "kl_to_standard",
    "kl_between",
    "symmetric_kl",
    "poe_combine",
    "reparam_sample",
    "log_pdf",
    "LOGVAR_CLAMP",
]

LOG_2PI = float(np.log(2.0 * np.pi))

# experts with |logvar| beyond this are treated as collapsed and clamped
LOGVAR_CLAMP = 20.0


@dataclass
class DiagGaussian:
    """Diagonal Gaussian with unconstrained log-variance parameterization."""

    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if not isinstance(self.mean, Tensor):
            self.mean = Tensor(self.mean)
        if not isinstance(self.logvar, Tensor):
            self.logvar = Tensor(self.logvar)
        if self.mean.shape != self.logvar.shape:
            raise ContractError(
                f"mean/logvar shape mismatch: {self.mean.shape} vs {self.logvar.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def detached(self) -> "DiagGaussian":
        return DiagGaussian(ad.stop_gradient(self.mean), ad.stop_gradient(self.logvar))

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean.value, self.logvar.value


def standard_normal(shape) -> DiagGaussian:
    return DiagGaussian(np.zeros(shape), np.zeros(shape))


def _require_same_dim(a: DiagGaussian, b: DiagGaussian) -> None:
    if a.mean.shape[-1] != b.mean.shape[-1]:
        raise ContractError(
            f"dimension mismatch: {a.mean.shape[-1]} vs {b.mean.shape[-1]}"
        )


def kl_to_standard(q: DiagGaussian) -> Tensor:
    """KL(q || N(0, I)), summed over coordinates."""
    var = ad.exp(q.logvar)
    per_coord = ad.square(q.mean) + var - 1.0 - q.logvar
    return 0.5 * ad.sum_(per_coord, axis=-1)


def kl_between(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over coordinates."""
    _require_same_dim(q, p)
    var_ratio = ad.exp(q.logvar - p.logvar)
    mean_term = ad.square(q.mean - p.mean) * ad.exp(-p.logvar)
    per_coord = p.logvar - q.logvar + var_ratio + mean_term - 1.0
    return 0.5 * ad.sum_(per_coord, axis=-1)


def symmetric_kl(a: DiagGaussian, b: DiagGaussian) -> Tensor:
    """Sum of both KL directions (the symmetrized divergence used as a loss)."""
    return kl_between(a, b) + kl_between(b, a)


def poe_combine(experts: list[DiagGaussian], include_standard_prior: bool = True,
                clamp_events: list | None = None) -> DiagGaussian:
    """Product of diagonal-Gaussian experts: precisions add, means are
    precision-weighted.

    With the prior flag a standard normal participates as one more expert,
    so an empty expert list returns N(0, I). Expert log-variances are clamped
    to +/- LOGVAR_CLAMP before inversion; clamp occurrences are appended to
    `clamp_events` when a list is supplied.
    """
    if not experts and not include_standard_prior:
        raise ContractError("poe_combine needs at least one expert or the prior")
    for e in experts[1:]:
        _require_same_dim(experts[0], e)

    precisions = []
    weighted_means = []
    for e in experts:
        lv = e.logvar
        n_clamped = int(np.sum(np.abs(lv.value) > LOGVAR_CLAMP))
        if n_clamped and clamp_events is not None:
            clamp_events.append(n_clamped)
        if n_clamped:
            # clamp without breaking differentiability off the clamp region
            lv = lv * Tensor(np.abs(lv.value) <= LOGVAR_CLAMP) + Tensor(
                np.clip(lv.value, -LOGVAR_CLAMP, LOGVAR_CLAMP)
                * (np.abs(lv.value) > LOGVAR_CLAMP)
            )
        prec = ad.exp(-lv)
        precisions.append(prec)
        weighted_means.append(e.mean * prec)

    if include_standard_prior:
        shape = experts[0].mean.shape if experts else (1,)
        precisions.append(Tensor(np.ones(shape)))
        weighted_means.append(Tensor(np.zeros(shape)))

    total_prec = precisions[0]
    total_wmean = weighted_means[0]
    for p, wm in zip(precisions[1:], weighted_means[1:]):
        total_prec = total_prec + p
        total_wmean = total_wmean + wm

    mean = total_wmean / total_prec
    logvar = -ad.log(total_prec)
    return DiagGaussian(mean, logvar)


def reparam_sample(q: DiagGaussian, noise) -> Tensor:
    """mean + std * noise; differentiable in the distribution parameters."""
    noise = noise if isinstance(noise, Tensor) else Tensor(noise)
    if noise.shape[-1] != q.mean.shape[-1]:
        raise ContractError(
            f"noise dim {noise.shape[-1]} != distribution dim {q.mean.shape[-1]}"
        )
    std = ad.exp(0.5 * q.logvar)
    return q.mean + std * noise


def log_pdf(q: DiagGaussian, x) -> Tensor:
    """Log density of x under q, summed over coordinates."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != q.mean.shape[-1]:
        raise ContractError(f"dim mismatch: {x.shape[-1]} vs {q.mean.shape[-1]}")
    quad = ad.square(x - q.mean) * ad.exp(-q.logvar)
    per_coord = -0.5 * (LOG_2PI + q.logvar + quad)
    return ad.sum_(per_coord, axis=-1)
