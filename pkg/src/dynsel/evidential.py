"""Dirichlet opinions from logits, the evidential ELBO and Dirichlet entropy.

Every function takes concentrations with the class axis last, works on
:class:`~dynsel.autodiff.Tensor` or plain arrays, and returns Tensors so the
result can be differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .numerics import DomainError

__all__ = [
    "DirichletOpinion",
    "EvidentialLossParts",
    "alpha_from_logits",
    "predictive_mean",
    "expected_nll",
    "label_adjusted_alpha",
    "kl_to_uniform",
    "elbo_loss",
    "dirichlet_entropy",
    "one_hot",
    "kl_weight_at",
]


@dataclass(frozen=True)
class DirichletOpinion:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if not np.all(np.isfinite(a)) or np.any(a <= 0):
            raise DomainError("Dirichlet concentrations must be finite and positive")
        object.__setattr__(self, "alpha", a)

    @property
    def n_classes(self) -> int:
        return self.alpha.shape[-1]

    @classmethod
    def from_logits(cls, z) -> "DirichletOpinion":
        return cls(alpha_from_logits(z).data)

    def mean(self) -> np.ndarray:
        return predictive_mean(self).data

    def entropy(self):
        return dirichlet_entropy(self).data


@dataclass
class EvidentialLossParts:
    nll: Tensor
    kl: Tensor
    total: Tensor


def _alpha(a) -> Tensor:
    if isinstance(a, DirichletOpinion):
        return Tensor(a.alpha)
    t = ad.as_tensor(a)
    if np.any(~np.isfinite(t.data)) or np.any(t.data <= 0):
        raise DomainError("Dirichlet concentrations must be finite and positive")
    return t


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        raise ValueError("labels must be integers")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise IndexError(f"label out of range for {n_classes} classes")
    return np.eye(n_classes)[labels]


def alpha_from_logits(z) -> Tensor:
    """alpha = softplus(z) + 1, so every concentration exceeds one."""
    z = ad.as_tensor(z)
    if not np.all(np.isfinite(z.data)):
        raise DomainError("logits must be finite")
    return ad.softplus(z) + 1.0


def predictive_mean(alpha) -> Tensor:
    a = _alpha(alpha)
    return a / a.sum(axis=-1, keepdims=True)


def expected_nll(alpha, labels) -> Tensor:
    """-E[ln mu_c] = psi(alpha_0) - psi(alpha_c), per sample."""
    a = _alpha(alpha)
    y = one_hot(labels, a.shape[-1])
    return ad.digamma(a.sum(axis=-1)) - (ad.digamma(a) * y).sum(axis=-1)


def label_adjusted_alpha(alpha, y_onehot) -> Tensor:
    """Replace the true-class concentration by one: y + (1 - y) * alpha."""
    a = _alpha(alpha)
    y = np.asarray(y_onehot, dtype=np.float64)
    if y.shape != a.shape or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=-1) == 1):
        raise ValueError("y must be a one-hot array with the same shape as alpha")
    return y + (1.0 - y) * a


def kl_to_uniform(alpha, y_onehot) -> Tensor:
    """KL(Dir(alpha_tilde) || Dir(1, ..., 1)) with alpha_tilde label-adjusted."""
    at = label_adjusted_alpha(alpha, y_onehot)
    n = at.shape[-1]
    a0 = at.sum(axis=-1)
    return (ad.lgamma(a0) - ad.lgamma(at).sum(axis=-1) - math.lgamma(n)
            + ((at - 1.0) * (ad.digamma(at) - ad.digamma(a0).reshape(a0.shape + (1,)))).sum(axis=-1))


def elbo_loss(alpha, labels, kl_weight: float = 1.0) -> EvidentialLossParts:
    """Negated evidential ELBO averaged over every leading axis."""
    a = _alpha(alpha)
    labels = np.asarray(labels)
    y = one_hot(labels, a.shape[-1])
    if y.shape != a.shape:
        y = np.broadcast_to(y, a.shape)
    nll = expected_nll(a, np.broadcast_to(labels, a.shape[:-1])).mean()
    kl = kl_to_uniform(a, y).mean()
    return EvidentialLossParts(nll=nll, kl=kl, total=nll + kl_weight * kl)


def dirichlet_entropy(alpha) -> Tensor:
    """Differential entropy of Dir(alpha), per leading index (may be negative)."""
    a = _alpha(alpha)
    n = a.shape[-1]
    a0 = a.sum(axis=-1)
    return (ad.lgamma(a).sum(axis=-1) - ad.lgamma(a0) + (a0 - n) * ad.digamma(a0)
            - ((a - 1.0) * ad.digamma(a)).sum(axis=-1))


def kl_weight_at(epoch: int, n_epochs: int, base: float = 1.0, warmup: bool = False) -> float:
    """KL weight for ``epoch``; linear ramp over the first quarter when ``warmup``."""
    if not warmup or n_epochs <= 0:
        return base
    ramp = max(1, int(math.ceil(0.25 * n_epochs)))
    return base * min(1.0, (epoch + 1) / ramp)
