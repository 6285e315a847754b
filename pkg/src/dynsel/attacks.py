"""L-infinity gradient attacks against a frozen model readout.

A model is anything exposing ``member_logits(x)`` and ``member_probs(x)``
returning Tensors of shape (M, B, N); evidential models also expose
``member_alpha(x)`` (needed for the ``dsc-fused`` target).  Attacks take
gradients with :func:`dynsel.autodiff.grad` with respect to the input only,
so model parameters and their ``.grad`` fields are never touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .evidential import one_hot
from .fusion import dsc_fused_probs
from .numerics import RngStream

__all__ = [
    "AttackSpec",
    "AttackError",
    "attack_loss",
    "fgsm",
    "pgd",
    "mim",
    "cw",
    "dim",
    "tim",
    "run_attack",
    "dim_transform",
    "tim_gradient",
    "project",
]

FAMILIES = ("fgsm", "pgd", "mim", "cw", "dim", "tim")
_TARGET_ALIASES = {
    "member": "single-member",
    "single-member": "single-member",
    "avg": "ensemble-average",
    "ensemble-average": "ensemble-average",
    "dsc": "dsc-fused",
    "dsc-fused": "dsc-fused",
}


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """Attack configuration.  ``eps`` and ``step_size`` are in input units.

    ``step_size=None`` resolves to ``eps`` for one step and ``2.5 * eps / steps``
    otherwise; ``random_init=None`` resolves to on for pgd/cw and off elsewhere.
    """

    family: str = "pgd"
    eps: float = 0.03
    steps: int = 20
    step_size: float | None = None
    momentum_decay: float = 1.0
    random_init: bool | None = None
    transform_prob: float = 0.5
    kernel_size: int = 7
    cw_kappa: float = 0.0
    loss_target: str = "ensemble-average"
    member: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise AttackError(f"unknown attack family {self.family!r}")
        if not self.eps >= 0:
            raise AttackError("eps must be >= 0")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")
        if self.step_size is not None and self.steps > 1 and not self.step_size > 0:
            raise AttackError("step_size must be > 0 when steps > 1")
        if self.kernel_size % 2 != 1:
            raise AttackError("kernel_size must be odd")
        if not 0 <= self.transform_prob <= 1:
            raise AttackError("transform_prob must lie in [0, 1]")
        if self.loss_target not in _TARGET_ALIASES:
            raise AttackError(f"unknown loss target {self.loss_target!r}")
        object.__setattr__(self, "loss_target", _TARGET_ALIASES[self.loss_target])

    @property
    def resolved_step(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return self.eps if self.steps == 1 else 2.5 * self.eps / self.steps

    @property
    def resolved_random_init(self) -> bool:
        if self.random_init is not None:
            return bool(self.random_init)
        return self.family in ("pgd", "cw")

    @property
    def label(self) -> str:
        return self.family

    def with_(self, **kw) -> "AttackSpec":
        return replace(self, **kw)


def _readout_probs(model, x: Tensor, spec: AttackSpec) -> Tensor:
    if spec.loss_target == "dsc-fused":
        if not getattr(model, "evidential", False):
            raise AttackError("dsc-fused target needs an evidential model")
        return dsc_fused_probs(model.member_alpha(x))
    probs = model.member_probs(x)
    if spec.loss_target == "single-member":
        return probs[spec.member]
    return probs.mean(axis=0)


def _readout_logits(model, x: Tensor, spec: AttackSpec) -> Tensor:
    if spec.loss_target == "dsc-fused":
        return ad.log(_readout_probs(model, x, spec))
    z = model.member_logits(x)
    if spec.loss_target == "single-member":
        return z[spec.member]
    return z.mean(axis=0)


def attack_loss(model, x, y, spec: AttackSpec) -> Tensor:
    """Batch-mean loss the attacker ascends.

    Cross-entropy on the targeted readout for every family except ``cw``,
    which uses the margin ``max(max_{k != c} z_k - z_c, -kappa)``.
    """
    x = ad.as_tensor(x)
    y = np.asarray(y)
    if spec.family == "cw":
        z = _readout_logits(model, x, spec)
        oh = one_hot(y, z.shape[-1])
        true = (z * oh).sum(axis=-1)
        other = ad.max_(z - 1e12 * oh, axis=-1)
        return ad.clamp(other - true, lo=-spec.cw_kappa).mean()
    p = _readout_probs(model, x, spec)
    oh = one_hot(y, p.shape[-1])
    return -ad.log((p * oh).sum(axis=-1)).mean()


def project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Project onto the eps-ball around ``x`` intersected with [0, 1].

    The result satisfies ``|x_adv - x| <= eps`` exactly in floating point.
    """
    out = np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)
    over = out - x > eps
    while np.any(over):
        out[over] = np.nextafter(out[over], -np.inf)
        over = out - x > eps
    under = x - out > eps
    while np.any(under):
        out[under] = np.nextafter(out[under], np.inf)
        under = x - out > eps
    return out


def _input_grad(model, x_adv: np.ndarray, y, spec: AttackSpec, transform=None) -> np.ndarray:
    xt = Tensor(x_adv, requires_grad=True)
    inp = transform(xt) if transform is not None else xt
    (g,) = ad.grad(attack_loss(model, inp, y, spec), [xt])
    return g


def _check_x(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if np.any(x < 0) or np.any(x > 1):
        raise AttackError("attack inputs must lie in [0, 1]")
    return x


def _l1_normalize(g: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, g.ndim))
    norm = np.abs(g).sum(axis=axes, keepdims=True)
    return g / np.maximum(norm, 1e-300)


def fgsm(model, x, y, spec: AttackSpec) -> np.ndarray:
    x = _check_x(x)
    if spec.eps == 0:
        return x.copy()
    g = _input_grad(model, x, y, spec)
    return project(x + spec.eps * np.sign(g), x, spec.eps)


def _iterate(model, x, y, spec: AttackSpec, rng: RngStream | None, momentum: bool,
             transform_fn=None, smooth=None) -> np.ndarray:
    x = _check_x(x)
    if spec.eps == 0:
        return x.copy()
    step = spec.resolved_step
    x_adv = x.copy()
    if spec.resolved_random_init:
        if rng is None:
            raise AttackError("random_init needs an rng")
        x_adv = project(x + rng.uniform(-spec.eps, spec.eps, size=x.shape), x, spec.eps)
    acc = np.zeros_like(x)
    for _ in range(spec.steps):
        transform = transform_fn() if transform_fn is not None else None
        g = _input_grad(model, x_adv, y, spec, transform)
        if smooth is not None:
            g = smooth(g)
        if momentum:
            acc = spec.momentum_decay * acc + _l1_normalize(g)
            direction = np.sign(acc)
        else:
            direction = np.sign(g)
        x_adv = project(x_adv + step * direction, x, spec.eps)
    return x_adv


def pgd(model, x, y, spec: AttackSpec, rng: RngStream | None = None) -> np.ndarray:
    return _iterate(model, x, y, spec, rng, momentum=False)


def cw(model, x, y, spec: AttackSpec, rng: RngStream | None = None) -> np.ndarray:
    """Margin-loss attack run with the PGD iteration scheme."""
    return _iterate(model, x, y, spec.with_(family="cw"), rng, momentum=False)


def mim(model, x, y, spec: AttackSpec, rng: RngStream | None = None) -> np.ndarray:
    return _iterate(model, x, y, spec, rng, momentum=True)


def dim(model, x, y, spec: AttackSpec, rng: RngStream) -> np.ndarray:
    """Momentum iteration with a random resize-and-pad transform at every step."""
    x = _check_x(x)
    if x.ndim != 4:
        raise ContractError("DIM needs image-shaped inputs (B, C, H, W)")

    def make():
        return lambda t: dim_transform(t, spec.transform_prob, rng)

    return _iterate(model, x, y, spec, rng, momentum=True, transform_fn=make)


def tim(model, x, y, spec: AttackSpec, rng: RngStream | None = None) -> np.ndarray:
    """Momentum iteration with Gaussian-smoothed input gradients."""
    x = _check_x(x)
    if x.ndim != 4:
        raise ContractError("TIM needs image-shaped inputs (B, C, H, W)")
    return _iterate(model, x, y, spec, rng, momentum=True,
                    smooth=lambda g: tim_gradient(g, spec.kernel_size))


def run_attack(model, x, y, spec: AttackSpec, rng: RngStream | None = None,
               batch_size: int | None = None) -> np.ndarray:
    """Dispatch on ``spec.family``; optionally process the input in chunks."""
    x = _check_x(x)
    y = np.asarray(y)
    if batch_size is not None and len(x) > batch_size:
        parts = [run_attack(model, x[i:i + batch_size], y[i:i + batch_size], spec, rng)
                 for i in range(0, len(x), batch_size)]
        return np.concatenate(parts)
    if spec.family == "fgsm":
        return fgsm(model, x, y, spec)
    fn = {"pgd": pgd, "mim": mim, "cw": cw, "dim": dim, "tim": tim}[spec.family]
    return fn(model, x, y, spec, rng)


def _resize_pad_matrix(size: int, new: int, offset: int) -> np.ndarray:
    # nearest-neighbour downsample to `new` samples, placed at `offset`
    m = np.zeros((size, size))
    src = np.minimum((np.arange(new) * size) // new, size - 1)
    m[offset + np.arange(new), src] = 1.0
    return m


def dim_transform(x, transform_prob: float, rng: RngStream, min_scale: float = 0.85) -> Tensor:
    """Random shrink then zero-pad back to the original size, with probability ``transform_prob``.

    Implemented as ``A @ x @ B.T`` with 0/1 matrices so gradients flow to ``x``.
    """
    x = ad.as_tensor(x)
    if x.ndim != 4:
        raise ContractError("dim_transform needs image-shaped input (B, C, H, W)")
    if transform_prob <= 0 or rng.random() >= transform_prob:
        return x
    h, w = x.shape[-2], x.shape[-1]
    lo = max(1, int(math.floor(min_scale * h)))
    new_h = int(rng.integers(lo, h)) if lo < h else h
    new_w = max(1, int(round(new_h * w / h)))
    top = int(rng.integers(0, h - new_h + 1))
    left = int(rng.integers(0, w - new_w + 1))
    a = _resize_pad_matrix(h, new_h, top)
    b = _resize_pad_matrix(w, new_w, left)
    return ad.matmul(ad.matmul(Tensor(a), x), Tensor(b.T))


def gaussian_kernel(kernel_size: int) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 != 1:
        raise AttackError("kernel_size must be a positive odd integer")
    sigma = kernel_size / 3.0
    r = kernel_size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-t * t / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def tim_gradient(grad, kernel_size: int) -> np.ndarray:
    """Depthwise Gaussian smoothing of an image gradient (edge-replicated border, same size)."""
    g = np.asarray(grad, dtype=np.float64)
    if g.ndim != 4:
        raise ContractError("tim_gradient needs an image-shaped gradient (B, C, H, W)")
    k = gaussian_kernel(kernel_size)
    if kernel_size == 1:
        return g.copy()
    r = kernel_size // 2
    padded = np.pad(g, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    out = np.zeros_like(g)
    h, w = g.shape[-2:]
    for i in range(kernel_size):
        for j in range(kernel_size):
            out += k[i, j] * padded[:, :, i:i + h, j:j + w]
    return out
