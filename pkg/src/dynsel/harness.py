"""Experiment orchestration: policy-grid attack evaluation, selection histograms, reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, project, run_attack
from .data import Dataset, gen_two_moons, load_idx
from .ensemble import Architecture, BaselineNet, EnsembleNet, init_from_pretrained, parameter_checksum
from .evidential import dirichlet_entropy
from .fusion import PolicySpec, policy_predict
from .numerics import RngStream
from .training import TrainConfig, fit, pretrain_baseline

log = logging.getLogger(__name__)

CSV_COLUMNS = ("policy", "attack", "eps", "accuracy", "proportion")
DEFAULT_ATTACKS = ("fgsm", "pgd", "mim", "cw")
DEFAULT_EPS = (8 / 255, 16 / 255)
WHITE_BOX_DEFAULTS = {"steps": 20, "step_size": 1 / 255}
DEFAULT_POLICIES = ("uncertain-1", "uncertain-2", "uncertain-2+dsc", "stochastic-2", "average", "dsc")


def _listify(value) -> list:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs.  Built from a flat key-value mapping.

    Keys without a prefix are :class:`TrainConfig` fields (``adv.*`` and
    ``diversity.*`` included).  Prefixed groups: ``data.*``, ``pretrain.*``,
    ``eval.*`` and ``policy.*``.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: tuple[AttackSpec, ...] = ()
    policies: tuple[PolicySpec, ...] = ()
    mode: str = "transfer"
    surrogate: str | None = None
    surrogate_seed: int = 1001
    task: str = "two-moons"
    n_train: int = 2000
    n_test: int = 500
    noise: float = 0.15
    data_seed: int = 0
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    pretrain_epochs: int = 100
    pretrain_lr: float = 0.05
    pretrain_momentum: float = 0.9
    per_sample: bool = False

    def __post_init__(self):
        if not self.policies:
            raise ValueError("at least one policy is required")
        if self.mode not in ("transfer", "white-box"):
            raise ValueError("mode must be 'transfer' or 'white-box'")

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        train, kw = {}, {}
        attack_names, eps_list = list(DEFAULT_ATTACKS), list(DEFAULT_EPS)
        attack_kw = {"steps": 50, "loss_target": "ensemble-average"}
        policy_names = list(DEFAULT_POLICIES)
        subset_fusion = "mean"
        single_policy = {}
        for key, value in flat.items():
            group, _, name = key.partition(".")
            if group == "data" and name:
                kw[{"n_train": "n_train", "n_test": "n_test", "noise": "noise", "seed": "data_seed",
                    "task": "task", "images": "images", "labels": "labels",
                    "test_images": "test_images", "test_labels": "test_labels"}[name]] = value
            elif group == "pretrain" and name:
                kw["pretrain_" + name] = value
            elif group == "eval" and name:
                if name == "attacks":
                    attack_names = _listify(value)
                elif name == "eps":
                    eps_list = [float(v) for v in _listify(value)]
                elif name == "policies":
                    policy_names = _listify(value)
                elif name in ("mode", "surrogate", "surrogate_seed", "per_sample"):
                    kw[name] = value
                else:
                    attack_kw[name] = value
            elif group == "policy" and name:
                if name == "subset_fusion":
                    subset_fusion = value
                else:
                    single_policy[name] = value
            else:
                train[key] = value
        if kw.get("mode") == "white-box":
            for k, v in WHITE_BOX_DEFAULTS.items():
                if f"eval.{k}" not in flat:
                    attack_kw[k] = v
        if single_policy:
            kind = single_policy.get("kind", "uncertain")
            h = int(single_policy.get("h", 1))
            policy_names = [f"{kind}-{h}" if kind in ("uncertain", "stochastic") else kind]
        attacks = tuple(AttackSpec(family=a, eps=e, **attack_kw) for a in attack_names for e in eps_list)
        policies = tuple(PolicySpec.parse(p, subset_fusion) for p in policy_names)
        return cls(train=TrainConfig.from_flat(train), attacks=attacks, policies=policies, **kw)

    def echo(self) -> dict:
        return {
            "train": self.train.to_flat(),
            "attacks": [asdict(a) for a in self.attacks],
            "policies": [p.label for p in self.policies],
            "mode": self.mode,
            "surrogate": self.surrogate,
            "surrogate_seed": self.surrogate_seed,
            "task": self.task,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "noise": self.noise,
            "data_seed": self.data_seed,
            "pretrain": {"epochs": self.pretrain_epochs, "lr": self.pretrain_lr,
                         "momentum": self.pretrain_momentum},
        }

    def architecture(self, ds: Dataset) -> Architecture:
        if self.task == "two-moons":
            return Architecture(n_classes=2, in_dim=2, hidden=(64, 64))
        return Architecture(n_classes=ds.n_classes, in_dim=None, image_shape=ds.feature_shape,
                            conv_channels=(8, 8), hidden=(64,))


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        flat = json.load(fh)
    if not isinstance(flat, dict):
        raise ValueError("config must be a flat JSON object")
    return ExperimentConfig.from_flat(flat)


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.task == "two-moons":
        root = RngStream(cfg.data_seed)
        train_rng, test_rng = root.spawn(2)
        return (gen_two_moons(cfg.n_train, cfg.noise, train_rng, "train"),
                gen_two_moons(cfg.n_test, cfg.noise, test_rng, "test"))
    if cfg.task == "mnist":
        train = load_idx(cfg.images, cfg.labels, "train")
        test = load_idx(cfg.test_images or cfg.images, cfg.test_labels or cfg.labels, "test")
        rng = RngStream(cfg.data_seed)
        return train.sample(cfg.n_train, rng), test.sample(cfg.n_test, rng)
    raise ValueError(f"unknown task {cfg.task!r}")


def pretrain(cfg: ExperimentConfig, train_set: Dataset, seed: int) -> BaselineNet:
    arch = cfg.architecture(train_set)
    return pretrain_baseline(arch, train_set, cfg.pretrain_epochs, cfg.pretrain_lr, RngStream(seed),
                             batch_size=cfg.train.batch_size, momentum=cfg.pretrain_momentum)


def build_victim(cfg: ExperimentConfig, train_set: Dataset,
                 baseline: BaselineNet | None = None) -> tuple[EnsembleNet, list[dict]]:
    t = cfg.train
    if baseline is None:
        baseline = pretrain(cfg, train_set, t.seed)
    net = init_from_pretrained(baseline, t.M, t.p, RngStream(t.seed).child(1), t.init_scale)
    return fit(net, train_set, t)


# -- evaluation -------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    policy: str
    attack: str
    eps: float
    accuracy: float
    proportion: float


@dataclass
class MetricsTable:
    rows: list[MetricRow] = field(default_factory=list)
    n_members: int = 0
    per_sample: dict = field(default_factory=dict)

    def accuracy(self, policy: str, attack: str, eps: float) -> float:
        for r in self.rows:
            if r.policy == policy and r.attack == attack and r.eps == eps:
                return r.accuracy
        raise KeyError((policy, attack, eps))

    def proportion(self, attack: str, eps: float) -> float:
        for r in self.rows:
            if r.attack == attack and r.eps == eps:
                return r.proportion
        raise KeyError((attack, eps))

    def to_dict(self) -> dict:
        return {"n_members": self.n_members, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsTable":
        return cls([MetricRow(**r) for r in d["rows"]], d["n_members"])

    def __eq__(self, other):
        return isinstance(other, MetricsTable) and self.to_dict() == other.to_dict()


@dataclass
class SelectionHistogram:
    condition: str
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def frequencies(self) -> np.ndarray:
        return self.counts / max(self.total, 1)

    def tv_distance(self, other: "SelectionHistogram") -> float:
        return 0.5 * float(np.abs(self.frequencies() - other.frequencies()).sum())


class AdversarialCache:
    """In-memory adversarial sets keyed by mode, attacked-model identity, attack and data."""

    def __init__(self):
        self._store: dict[tuple, np.ndarray] = {}

    @staticmethod
    def key(mode: str, source_model, spec: AttackSpec, data: Dataset, seed: int) -> tuple:
        digest = hashlib.sha256(data.inputs.tobytes() + data.labels.tobytes()).hexdigest()
        return (mode, parameter_checksum(source_model), repr(spec), digest, seed)

    def get_or_compute(self, key, compute):
        if key not in self._store:
            self._store[key] = compute()
        return self._store[key]

    def keys(self):
        return list(self._store)


def condition_label(spec: AttackSpec | None) -> str:
    return "none@0" if spec is None else f"{spec.family}@{spec.eps:.6g}"


def adversarial_set(victim, spec: AttackSpec, test: Dataset, mode: str, seed: int,
                    surrogate=None, cache: AdversarialCache | None = None) -> np.ndarray:
    source = surrogate if mode == "transfer" else victim
    if mode == "transfer" and surrogate is None:
        raise ValueError("transfer mode needs a surrogate")
    if source is not victim and source.arch != victim.arch:
        raise ValueError("surrogate and victim input architectures differ")
    if mode == "transfer" and not getattr(source, "evidential", False) and spec.loss_target == "dsc-fused":
        spec = spec.with_(loss_target="ensemble-average")
    rng = RngStream(seed).child(hash_label(condition_label(spec)))

    def compute():
        return run_attack(source, test.inputs, test.labels, spec, rng, batch_size=256)

    if cache is None:
        return compute()
    return cache.get_or_compute(AdversarialCache.key(mode, source, spec, test, seed), compute)


def hash_label(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:4], "big")


def _member_alpha(victim, x) -> np.ndarray:
    with ad.no_grad():
        return victim.member_alpha(x).data


def run_attack_eval(victim: EnsembleNet, cfg: ExperimentConfig, test: Dataset, surrogate=None,
                    cache: AdversarialCache | None = None, seed: int | None = None) -> MetricsTable:
    """Accuracy of every policy and the Proportion metric for benign data and each attack."""
    seed = cfg.train.seed if seed is None else seed
    table = MetricsTable(n_members=victim.n_members)
    conditions = [None, *cfg.attacks]
    for spec in conditions:
        if spec is None or spec.eps == 0:
            x_eval = test.inputs
        else:
            x_eval = adversarial_set(victim, spec, test, cfg.mode, seed, surrogate, cache)
        alpha = _member_alpha(victim, x_eval)
        member_pred = alpha.argmax(axis=-1)  # (M, B)
        proportion = float((member_pred == test.labels[None, :]).sum(axis=0).mean())
        attack = "none" if spec is None else spec.family
        eps = 0.0 if spec is None else float(spec.eps)
        for pol in cfg.policies:
            if pol.kind in ("uncertain", "stochastic") and pol.h > victim.n_members:
                continue
            rng = RngStream(seed).child(hash_label(f"{pol.label}|{condition_label(spec)}"))
            out = policy_predict(alpha, pol, rng)
            correct = out.predictions == test.labels
            table.rows.append(MetricRow(pol.label, attack, eps, float(correct.mean()), proportion))
            if cfg.per_sample:
                table.per_sample[(pol.label, attack, eps)] = {
                    "prediction": out.predictions.tolist(),
                    "label": test.labels.tolist(),
                    "selected": out.selected.tolist(),
                }
    return table


def run_dynamics_report(victim: EnsembleNet, cfg: ExperimentConfig, test: Dataset, surrogate=None,
                        cache: AdversarialCache | None = None, seed: int | None = None) -> dict[str, SelectionHistogram]:
    """Histogram of the minimum-entropy member per condition."""
    seed = cfg.train.seed if seed is None else seed
    out = {}
    for spec in [None, *cfg.attacks]:
        if spec is None or spec.eps == 0:
            x_eval = test.inputs
        else:
            x_eval = adversarial_set(victim, spec, test, cfg.mode, seed, surrogate, cache)
        alpha = _member_alpha(victim, x_eval)
        with ad.no_grad():
            ent = dirichlet_entropy(alpha).data  # (M, B)
        chosen = np.argmin(ent, axis=0)
        label = "benign" if spec is None else condition_label(spec)
        out[label] = SelectionHistogram(label, np.bincount(chosen, minlength=victim.n_members))
    return out


# -- reporting --------------------------------------------------------------

def metrics_csv(table: MetricsTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in table.rows:
        writer.writerow([r.policy, r.attack, repr(r.eps), repr(r.accuracy), repr(r.proportion)])
    return buf.getvalue()


def emit_report(table: MetricsTable, histograms: dict[str, SelectionHistogram], out_dir,
                config: dict | None = None, seed: int | None = None, formats=("csv", "json"),
                history: list | None = None) -> list[Path]:
    """Write ``metrics.csv``, ``histograms.csv`` and ``report.json`` under ``out_dir``."""
    if not table.rows:
        raise ValueError("nothing to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        p = out_dir / "metrics.csv"
        p.write_text(metrics_csv(table))
        written.append(p)
        if histograms:
            n = len(next(iter(histograms.values())).counts)
            lines = ["condition," + ",".join(f"member_{i}" for i in range(n))]
            lines += [f"{k}," + ",".join(str(int(c)) for c in h.counts) for k, h in histograms.items()]
            p = out_dir / "histograms.csv"
            p.write_text("\n".join(lines) + "\n")
            written.append(p)
    if "json" in formats:
        doc = {
            "seed": seed,
            "config": config or {},
            "metrics": table.to_dict(),
            "histograms": {k: [int(c) for c in h.counts] for k, h in histograms.items()},
        }
        if history is not None:
            doc["history"] = history
        if table.per_sample:
            doc["per_sample"] = [{"policy": k[0], "attack": k[1], "eps": k[2], **v}
                                 for k, v in table.per_sample.items()]
        p = out_dir / "report.json"
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        written.append(p)
    return written


def read_metrics_json(path) -> MetricsTable:
    with open(path) as fh:
        return MetricsTable.from_dict(json.load(fh)["metrics"])


# -- self-checks ------------------------------------------------------------

def self_check(table: MetricsTable, histograms: dict[str, SelectionHistogram], n_test: int) -> list[str]:
    """Invariant violations in a finished run (empty list when all pass)."""
    problems = []
    m = table.n_members
    benign = {r.policy: r.accuracy for r in table.rows if r.attack == "none"}
    for r in table.rows:
        if not 0.0 <= r.accuracy <= 1.0:
            problems.append(f"accuracy out of range: {r}")
        if not 0.0 <= r.proportion <= m:
            problems.append(f"proportion out of range: {r}")
        if r.eps == 0 and r.attack != "none" and not r.policy.startswith("stochastic") \
                and r.accuracy != benign.get(r.policy):
            problems.append(f"eps=0 row differs from benign accuracy: {r}")
    for key, h in histograms.items():
        if h.total != n_test:
            problems.append(f"histogram {key} sums to {h.total}, expected {n_test}")
    return problems


def check_ball(x_adv: np.ndarray, x: np.ndarray, eps: float) -> bool:
    return bool(np.all(np.abs(x_adv - x) <= eps) and np.all(x_adv >= 0) and np.all(x_adv <= 1))


@dataclass
class ExperimentResult:
    table: MetricsTable
    histograms: dict[str, SelectionHistogram]
    history: list[dict]
    victim: EnsembleNet
    surrogate: object
    problems: list[str]


def run_experiment(cfg: ExperimentConfig, out_dir=None, victim: EnsembleNet | None = None,
                   surrogate=None) -> ExperimentResult:
    """Pretrain, fine-tune, evaluate and (optionally) write the report."""
    train_set, test_set = load_datasets(cfg)
    history = []
    if victim is None:
        victim, history = build_victim(cfg, train_set)
    if surrogate is None and cfg.mode == "transfer":
        surrogate = pretrain(cfg, train_set, cfg.surrogate_seed)
    cache = AdversarialCache()
    table = run_attack_eval(victim, cfg, test_set, surrogate, cache)
    hists = run_dynamics_report(victim, cfg, test_set, surrogate, cache)
    problems = self_check(table, hists, len(test_set))
    if out_dir is not None:
        emit_report(table, hists, out_dir, cfg.echo(), cfg.train.seed, history=history)
    return ExperimentResult(table, hists, history, victim, surrogate, problems)
