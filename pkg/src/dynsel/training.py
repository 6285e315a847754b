"""Baseline pretraining and adversarial evidential fine-tuning of the ensemble.

One fine-tuning step:

1. craft adversarial inputs against the current ensemble,
2. run benign and adversarial inputs through the ensemble together,
3. minimise ``-ELBO(benign) - R(benign, adversarial)`` with one backward pass,
4. add the factor repulsion to the r/s gradients,
5. update shared weights and member factors with separate SGD optimisers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, run_attack
from .autodiff import Tensor
from .data import Dataset, batch_iter
from .diversity import DiversityConfig, apply_regularizer, factor_vectors, min_pairwise_distance
from .ensemble import Architecture, BaselineNet, EnsembleNet
from .evidential import dirichlet_entropy, elbo_loss, kl_weight_at, one_hot
from .fusion import PolicySpec, dsc_fused_probs, policy_predict
from .numerics import DomainError, RngStream

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainingError",
    "SgdOptimizer",
    "pretrain_baseline",
    "uncertainty_correction_loss",
    "train_step",
    "fit",
]

HISTORY_POLICIES = ("uncertain-1", "average", "dsc")


class TrainingError(RuntimeError):
    pass


def _default_adv() -> AttackSpec:
    return AttackSpec("pgd", eps=0.03, steps=20)


@dataclass(frozen=True)
class TrainConfig:
    M: int = 4
    p: int = 2
    lr_shared: float = 0.001
    lr_factors: float = 0.01
    epochs: int = 20
    batch_size: int = 64
    gamma: float = 8.0
    kl_weight: float = 1.0
    kl_warmup: bool = False
    momentum: float = 0.0
    init_scale: float = 0.1
    eval_size: int = 256
    seed: int = 0
    adv: AttackSpec = field(default_factory=_default_adv)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)

    def __post_init__(self):
        if not (self.lr_shared > 0 and self.lr_factors > 0):
            raise ValueError("learning rates must be > 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.M < 1 or self.p < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("M, p, batch_size must be >= 1 and epochs >= 0")

    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("adv", "diversity"):
                for k, v in asdict(value).items():
                    out[f"{f.name}.{k}"] = v
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        """Build from flat keys; ``adv.*`` and ``diversity.*`` address the nested specs."""
        top, adv, div = {}, {}, {}
        names = {f.name for f in fields(cls)}
        for key, value in flat.items():
            if key.startswith("adv."):
                adv[key[4:]] = value
            elif key.startswith("diversity."):
                div[key[10:]] = value
            elif key in names:
                top[key] = value
            else:
                raise KeyError(f"unknown training config key {key!r}")
        if adv:
            top["adv"] = replace(_default_adv(), **adv)
        if div:
            top["diversity"] = replace(DiversityConfig(), **div)
        return cls(**top)


class SgdOptimizer:
    """Plain SGD (optional heavy-ball momentum) over the parameters it owns."""

    def __init__(self, params, lr: float, momentum: float = 0.0, tag: str = ""):
        if not lr > 0:
            raise ValueError("learning rate must be > 0")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.tag = tag
        self._ids = {id(p) for p in self.params}
        self._velocity = {id(p): np.zeros_like(p.data) for p in self.params}

    def owns(self, param: Tensor) -> bool:
        return id(param) in self._ids

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.momentum:
                v = self._velocity[id(p)] = self.momentum * self._velocity[id(p)] + g
                g = v
            p.data = p.data - self.lr * g

    def zero_grad(self):
        ad.zero_grad(self.params)


def _check_finite(value: float, what: str, epoch: int | None = None):
    if not math.isfinite(value):
        where = f" at epoch {epoch}" if epoch is not None else ""
        raise TrainingError(f"{what} is not finite{where}")


def pretrain_baseline(arch: Architecture, dataset: Dataset, epochs: int, lr: float, rng: RngStream,
                      batch_size: int = 64, momentum: float = 0.9) -> BaselineNet:
    """Softmax cross-entropy training of a plain network."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    net = BaselineNet.init(arch, rng)
    opt = SgdOptimizer(net.parameters(), lr, momentum, tag="baseline")
    for epoch in range(epochs):
        for xb, yb in batch_iter(dataset, batch_size, shuffle=True, rng=rng):
            opt.zero_grad()
            logp = ad.log_softmax(net.forward(xb), axis=-1)
            loss = -(logp * one_hot(yb, arch.n_classes)).sum(axis=-1).mean()
            _check_finite(float(loss.data), "baseline loss", epoch)
            loss.backward()
            opt.step()
    return net


def uncertainty_correction_loss(benign_alpha, adv_alpha, adv_labels, gamma: float) -> Tensor:
    """Batch mean of ``sum_m min(|H_m(x) - H_m(x')|, gamma) + ln p_DSC(y | x')``.

    Alpha arrays are (M, B, N).  The value is meant to be maximised.
    """
    benign_alpha, adv_alpha = ad.as_tensor(benign_alpha), ad.as_tensor(adv_alpha)
    if benign_alpha.shape != adv_alpha.shape or benign_alpha.ndim != 3:
        raise ValueError(f"benign {benign_alpha.shape} and adversarial {adv_alpha.shape} alpha must match as (M, B, N)")
    labels = np.asarray(adv_labels)
    if labels.shape != (benign_alpha.shape[1],):
        raise ValueError("one label per sample required")
    gap = ad.abs_(dirichlet_entropy(benign_alpha) - dirichlet_entropy(adv_alpha))
    margin = ad.clamp(gap, hi=gamma).sum(axis=0)
    fused = dsc_fused_probs(adv_alpha)
    log_lik = ad.log((fused * one_hot(labels, fused.shape[-1])).sum(axis=-1))
    return (margin + log_lik).mean()


def make_optimizers(net: EnsembleNet, cfg: TrainConfig) -> tuple[SgdOptimizer, SgdOptimizer]:
    return (SgdOptimizer(net.shared_parameters(), cfg.lr_shared, cfg.momentum, tag="shared"),
            SgdOptimizer(net.factor_parameters(), cfg.lr_factors, cfg.momentum, tag="factors"))


def train_step(net: EnsembleNet, batch, cfg: TrainConfig, rng: RngStream,
               optimizers: tuple[SgdOptimizer, SgdOptimizer] | None = None,
               kl_weight: float | None = None) -> dict:
    """One fine-tuning step on ``batch = (x, y)``; returns scalar metrics."""
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    opt_shared, opt_factors = optimizers or make_optimizers(net, cfg)
    kl_w = cfg.kl_weight if kl_weight is None else kl_weight

    x_adv = run_attack(net, x, y, cfg.adv, rng)
    both = np.concatenate([x, x_adv])
    try:
        alpha = net.member_alpha(both)
    except DomainError as exc:
        raise TrainingError(f"network output is not finite: {exc}") from exc
    b = len(x)
    benign, adv = alpha[:, :b], alpha[:, b:]

    m = net.n_members
    parts = elbo_loss(benign, np.broadcast_to(y, (m, b)), kl_w)
    neg_elbo = parts.total * float(m)  # summed over members
    reward = uncertainty_correction_loss(benign, adv, y, cfg.gamma)
    total = neg_elbo - reward
    for value, what in ((total, "total loss"), (neg_elbo, "ELBO"), (reward, "correction term")):
        _check_finite(float(value.data), what)

    opt_shared.zero_grad()
    opt_factors.zero_grad()
    total.backward()
    named = net.named_parameters()
    grads = {k: t.grad for k, t in named.items() if t.grad is not None}
    for k, g in apply_regularizer(grads, net, cfg.diversity).items():
        named[k].grad = g
    opt_shared.step()
    opt_factors.step()

    with ad.no_grad():
        gap = np.abs(dirichlet_entropy(benign.data).data - dirichlet_entropy(adv.data).data)
    return {
        "loss": float(total.data),
        "neg_elbo": float(neg_elbo.data),
        "nll": float(parts.nll.data),
        "kl": float(parts.kl.data),
        "correction": float(reward.data),
        "entropy_gap": float(gap.mean()),
    }


def evaluate_epoch(net: EnsembleNet, eval_set: Dataset, cfg: TrainConfig,
                   policies=HISTORY_POLICIES) -> dict:
    """Benign policy accuracies, entropies and factor spread on a fixed subset."""
    attack_rng = RngStream(cfg.seed).child(7919)
    x, y = eval_set.inputs, eval_set.labels
    x_adv = run_attack(net, x, y, cfg.adv, attack_rng)
    with ad.no_grad():
        a_benign = net.member_alpha(x).data
        a_adv = net.member_alpha(x_adv).data
        h_benign = dirichlet_entropy(a_benign).data
        h_adv = dirichlet_entropy(a_adv).data
    acc = {}
    for name in policies:
        spec = PolicySpec.parse(name)
        if spec.kind in ("uncertain", "stochastic") and spec.h > net.n_members:
            continue
        out = policy_predict(a_benign, spec, RngStream(cfg.seed).child(31))
        acc[spec.label] = float(np.mean(out.predictions == y))
    return {
        "accuracy": acc,
        "entropy_benign": float(h_benign.mean()),
        "entropy_adv": float(h_adv.mean()),
        "entropy_gap": float(np.abs(h_benign - h_adv).mean()),
        "min_factor_distance": min_pairwise_distance(factor_vectors(net)),
    }


def fit(net: EnsembleNet, dataset: Dataset, cfg: TrainConfig, eval_set: Dataset | None = None,
        history_policies=HISTORY_POLICIES) -> tuple[EnsembleNet, list[dict]]:
    """Run ``cfg.epochs`` epochs of :func:`train_step`; ``net`` is updated in place."""
    root = RngStream(cfg.seed)
    if eval_set is None:
        eval_set = dataset.subset(np.arange(min(cfg.eval_size, len(dataset))))
    optimizers = make_optimizers(net, cfg)
    history = []
    for epoch in range(cfg.epochs):
        epoch_rng = root.child(epoch)
        kl_w = kl_weight_at(epoch, cfg.epochs, cfg.kl_weight, cfg.kl_warmup)
        losses = []
        for xb, yb in batch_iter(dataset, cfg.batch_size, shuffle=True, rng=epoch_rng):
            try:
                metrics = train_step(net, (xb, yb), cfg, epoch_rng, optimizers, kl_weight=kl_w)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            losses.append(metrics["loss"])
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "kl_weight": kl_w}
        record.update(evaluate_epoch(net, eval_set, cfg, history_policies))
        log.info("epoch %d loss %.4f acc %s gap %.4f", epoch, record["loss"], record["accuracy"],
                 record["entropy_gap"])
        history.append(record)
    return net, history
