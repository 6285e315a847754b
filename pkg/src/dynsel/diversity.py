"""RBF kernel repulsion between ensemble members' rank factors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DiversityConfig",
    "rbf_kernel",
    "median_bandwidth",
    "repulsive_term",
    "repulsive_terms",
    "apply_regularizer",
    "min_pairwise_distance",
]

BANDWIDTH_FLOOR = 1e-8


@dataclass(frozen=True)
class DiversityConfig:
    """``bandwidth`` is a positive number or ``"median"``."""

    weight: float = 0.1
    bandwidth: float | str = "median"
    normalization: str = "svgd-normalized"

    def __post_init__(self):
        if not math.isfinite(self.weight) or self.weight < 0:
            raise ValueError("diversity weight must be finite and >= 0")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ValueError("bandwidth must be a positive number or 'median'")
        elif not self.bandwidth > 0:
            raise ValueError("fixed bandwidth must be > 0")
        if self.normalization not in ("svgd-normalized", "plain-sum"):
            raise ValueError("normalization must be 'svgd-normalized' or 'plain-sum'")


def rbf_kernel(a, b, h: float) -> float:
    """exp(-||a - b||^2 / h)."""
    if not h > 0:
        raise ValueError("bandwidth must be > 0")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"kernel arguments differ in shape: {a.shape} vs {b.shape}")
    if math.isinf(h):
        return 1.0
    return float(np.exp(-np.sum((a - b) ** 2) / h))


def _sq_dists(v: np.ndarray) -> np.ndarray:
    diff = v[:, None, :] - v[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(vectors) -> float:
    """Median pairwise squared distance over ln(M + 1), floored at 1e-8."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    v = v.reshape(v.shape[0], -1)
    m = v.shape[0]
    if m < 2:
        raise ValueError("median bandwidth needs at least two vectors")
    iu = np.triu_indices(m, k=1)
    med = float(np.median(_sq_dists(v)[iu]))
    return max(med / math.log(m + 1), BANDWIDTH_FLOOR)


def repulsive_terms(vectors, cfg: DiversityConfig) -> np.ndarray:
    """Repulsive term for every member at once; rows follow ``vectors``.

    Row ``i`` is ``weight * sum_j grad_{v_i} k(v_i, v_j)``, divided by
    ``sum_j k(v_i, v_j)`` in svgd-normalized mode.
    """
    v = np.asarray(vectors, dtype=np.float64)
    shape = v.shape
    v = v.reshape(shape[0], -1)
    if cfg.weight == 0:
        return np.zeros(shape)
    h = median_bandwidth(v) if cfg.bandwidth == "median" else float(cfg.bandwidth)
    k = np.exp(-_sq_dists(v) / h)  # (M, M)
    diff = v[:, None, :] - v[None, :, :]
    grads = (-2.0 / h) * diff * k[:, :, None]
    term = grads.sum(axis=1)
    if cfg.normalization == "svgd-normalized":
        term = term / k.sum(axis=1, keepdims=True)
    return (cfg.weight * term).reshape(shape)


def repulsive_term(i: int, vectors, cfg: DiversityConfig) -> np.ndarray:
    """Repulsive term for member ``i`` given every member's factor vector."""
    v = np.asarray(vectors)
    if not 0 <= i < v.shape[0]:
        raise IndexError(f"member {i} out of range")
    return repulsive_terms(v, cfg)[i]


def apply_regularizer(gradients: dict[str, np.ndarray], net, cfg: DiversityConfig) -> dict[str, np.ndarray]:
    """Add the repulsion to the loss gradients of every layer's r and s factors.

    ``gradients`` maps parameter names (as in ``net.named_parameters()``) to
    descent gradients.  The kernel gradient points toward the other members,
    so adding it to a descent gradient makes the following SGD step move the
    member away from them.  Shared weights and biases are left untouched.
    """
    params = net.named_parameters()
    missing = set(gradients) - set(params)
    if missing:
        raise KeyError(f"gradients for unknown parameters: {sorted(missing)}")
    for name, g in gradients.items():
        if np.shape(g) != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, expected {params[name].shape}")
    out = dict(gradients)
    if cfg.weight == 0:
        return out
    for i in range(len(net.shared)):
        for fam, tensors in (("r", net.r), ("s", net.s)):
            name = f"member.{i}.{fam}"
            values = tensors[i].data
            term = repulsive_terms(values.reshape(values.shape[0], -1), cfg).reshape(values.shape)
            base = out.get(name)
            out[name] = term if base is None else base + term
    return out


def factor_vectors(net) -> np.ndarray:
    """All r and s factors of each member flattened into one row per member."""
    m = net.n_members
    parts = [t.data.reshape(m, -1) for t in (*net.r, *net.s)]
    return np.concatenate(parts, axis=1)


def min_pairwise_distance(vectors) -> float:
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape[0] < 2:
        return 0.0
    d = np.sqrt(_sq_dists(v.reshape(v.shape[0], -1)))
    iu = np.triu_indices(v.shape[0], k=1)
    return float(d[iu].min())
