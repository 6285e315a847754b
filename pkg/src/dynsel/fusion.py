"""Decision-level fusion (Dempster-Shafer, averaging) and member selection policies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evidential import dirichlet_entropy, DirichletOpinion
from .numerics import RngStream

__all__ = [
    "FusionError",
    "SubjectiveOpinion",
    "PolicySpec",
    "PolicyOutcome",
    "dsc_combine",
    "dsc_fuse_all",
    "dsc_fused_probs",
    "select_members",
    "policy_predict",
]

_CONFLICT_LIMIT = 1.0 - 1e-12


class FusionError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SubjectiveOpinion:
    """Belief masses per class plus an uncertainty mass; they sum to one.

    Arrays may carry leading batch axes: ``belief`` is (..., N), ``u`` is (...).
    """

    belief: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.belief, dtype=np.float64)
        u = np.asarray(self.u, dtype=np.float64)
        if np.any(b < 0) or np.any(u <= 0) or np.any(u > 1 + 1e-12):
            raise ValueError("beliefs must be >= 0 and u in (0, 1]")
        if not np.allclose(b.sum(axis=-1) + u, 1.0, atol=1e-9, rtol=0):
            raise ValueError("beliefs and uncertainty must sum to one")
        object.__setattr__(self, "belief", b)
        object.__setattr__(self, "u", u)

    @property
    def n_classes(self) -> int:
        return self.belief.shape[-1]

    @classmethod
    def from_alpha(cls, alpha) -> "SubjectiveOpinion":
        a = alpha.alpha if isinstance(alpha, DirichletOpinion) else np.asarray(alpha, dtype=np.float64)
        strength = a.sum(axis=-1)
        return cls((a - 1.0) / strength[..., None], a.shape[-1] / strength)

    @classmethod
    def vacuous(cls, n_classes: int) -> "SubjectiveOpinion":
        return cls(np.zeros(n_classes), np.asarray(1.0))

    def to_alpha(self) -> np.ndarray:
        strength = self.n_classes / self.u
        return self.belief * strength[..., None] + 1.0

    def probs(self) -> np.ndarray:
        """Projected class probabilities: belief + u / N."""
        return self.belief + self.u[..., None] / self.n_classes


def dsc_combine(a: SubjectiveOpinion, b: SubjectiveOpinion) -> SubjectiveOpinion:
    """Reduced Dempster rule for two opinions over the same classes."""
    if a.n_classes != b.n_classes:
        raise ValueError("opinions must cover the same classes")
    ba, bb = a.belief, b.belief
    conflict = ba.sum(axis=-1) * bb.sum(axis=-1) - (ba * bb).sum(axis=-1)
    if np.any(conflict >= _CONFLICT_LIMIT):
        raise FusionError("total conflict between opinions")
    norm = 1.0 - conflict
    belief = (ba * bb + ba * b.u[..., None] + bb * a.u[..., None]) / norm[..., None]
    u = a.u * b.u / norm
    # restore sum-to-one against rounding drift
    total = belief.sum(axis=-1) + u
    return SubjectiveOpinion(belief / total[..., None], u / total)


def dsc_fuse_all(opinions) -> SubjectiveOpinion:
    """Left fold of :func:`dsc_combine` in member order."""
    opinions = list(opinions)
    if not opinions:
        raise ValueError("need at least one opinion")
    fused = opinions[0]
    for op in opinions[1:]:
        fused = dsc_combine(fused, op)
    return fused


def dsc_fused_probs(alpha) -> Tensor:
    """Differentiable DSC-fused class probabilities for alpha of shape (M, ..., N).

    Uses the unnormalised mass products ``prod_m (b_mk + u_m) - prod_m u_m`` and
    ``prod_m u_m``, which equal the member-order fold after normalisation.
    Products go through exp(sum(log)) so every member receives its gradient by
    the same arithmetic path.
    """
    alpha = ad.as_tensor(alpha)
    n = alpha.shape[-1]
    strength = alpha.sum(axis=-1, keepdims=True)
    belief = (alpha - 1.0) / strength
    u = n / strength  # (M, ..., 1)
    prod_bu = ad.exp(ad.log(belief + u).sum(axis=0))
    prod_u = ad.exp(ad.log(u).sum(axis=0))
    mass = prod_bu - prod_u
    z = mass.sum(axis=-1, keepdims=True) + prod_u
    return (mass + prod_u * (1.0 / n)) / z


_KINDS = ("uncertain", "stochastic", "average", "dsc")


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    h: int = 1
    subset_fusion: str = "mean"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.h < 1:
            raise ValueError("h must be >= 1")
        if self.subset_fusion not in ("mean", "dsc"):
            raise ValueError("subset_fusion must be 'mean' or 'dsc'")

    @classmethod
    def parse(cls, text: str, subset_fusion: str = "mean") -> "PolicySpec":
        text = text.strip().lower()
        if text.endswith("+dsc"):
            text, subset_fusion = text[:-4], "dsc"
        for kind in ("uncertain", "stochastic"):
            if text.startswith(kind + "-"):
                return cls(kind, int(text.split("-", 1)[1]), subset_fusion)
        name = text.split("-", 1)[0]
        return cls(name, 1, subset_fusion)

    @property
    def label(self) -> str:
        if self.kind in ("uncertain", "stochastic"):
            suffix = "" if self.subset_fusion == "mean" else "+dsc"
            return f"{self.kind}-{self.h}{suffix}"
        return self.kind

    def n_selected(self, n_members: int) -> int:
        if self.kind in ("average", "dsc"):
            return n_members
        if self.h > n_members:
            raise ValueError(f"h={self.h} exceeds member count {n_members}")
        return self.h


@dataclass
class PolicyOutcome:
    uncertainties: np.ndarray  # (B, M)
    selected: np.ndarray  # (B, h)
    probs: np.ndarray  # (B, N)

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=-1)


def select_members(uncertainties, spec: PolicySpec, rng: RngStream | None = None) -> list[int]:
    """Member indices for one sample; lowest uncertainty first, ties to lower index."""
    h_vals = np.asarray(uncertainties, dtype=np.float64)
    m = h_vals.shape[0]
    k = spec.n_selected(m)
    if spec.kind == "uncertain":
        return [int(i) for i in np.argsort(h_vals, kind="stable")[:k]]
    if spec.kind == "stochastic":
        if rng is None:
            raise ValueError("stochastic selection needs an rng")
        return [int(i) for i in rng.choice(m, size=k, replace=False)]
    return list(range(m))


def _alpha_array(member_alpha) -> np.ndarray:
    if isinstance(member_alpha, Tensor):
        return member_alpha.data
    if isinstance(member_alpha, (list, tuple)) and member_alpha and isinstance(member_alpha[0], DirichletOpinion):
        return np.stack([op.alpha for op in member_alpha])
    return np.asarray(member_alpha, dtype=np.float64)


def policy_predict(member_alpha, spec: PolicySpec, rng: RngStream | None = None) -> PolicyOutcome:
    """Fused prediction for alpha of shape (M, B, N) (or (M, N) for one sample)."""
    alpha = _alpha_array(member_alpha)
    single = alpha.ndim == 2
    if single:
        alpha = alpha[:, None, :]
    m, batch, n = alpha.shape
    k = spec.n_selected(m)
    with ad.no_grad():
        ent = dirichlet_entropy(alpha).data.T  # (B, M)
    means = alpha / alpha.sum(axis=-1, keepdims=True)
    if spec.kind == "uncertain":
        selected = np.argsort(ent, axis=1, kind="stable")[:, :k]
    elif spec.kind == "stochastic":
        if rng is None:
            raise ValueError("stochastic selection needs an rng")
        selected = np.stack([rng.choice(m, size=k, replace=False) for _ in range(batch)])
    else:
        selected = np.tile(np.arange(m), (batch, 1))

    use_dsc = spec.kind == "dsc" or (spec.kind in ("uncertain", "stochastic") and spec.subset_fusion == "dsc")
    if use_dsc:
        chosen = np.take_along_axis(alpha.transpose(1, 0, 2), selected[:, :, None], axis=1)  # (B, k, N)
        fused = dsc_fuse_all(SubjectiveOpinion.from_alpha(chosen[:, j]) for j in range(k))
        probs = fused.probs()
    else:
        chosen = np.take_along_axis(means.transpose(1, 0, 2), selected[:, :, None], axis=1)
        probs = chosen.mean(axis=1)
    outcome = PolicyOutcome(ent, selected, probs)
    if single:
        outcome = PolicyOutcome(ent[0], selected[0], probs[0])
    return outcome
