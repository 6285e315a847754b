"""Command-line entry point: ``dynsel {pretrain,train,attack,eval,dynamics,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from . import autodiff as ad
from .attacks import run_attack
from .ensemble import BaselineNet, EnsembleNet, load_checkpoint, save_checkpoint
from .numerics import RngStream

log = logging.getLogger("dynsel")


def _config(args) -> harness.ExperimentConfig:
    flat = {}
    if args.config:
        with open(args.config) as fh:
            flat = json.load(fh)
        if not isinstance(flat, dict):
            raise SystemExit("config must be a flat JSON object")
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        try:
            flat[key] = json.loads(value)
        except json.JSONDecodeError:
            flat[key] = value
    if getattr(args, "seed", None) is not None:
        flat["seed"] = args.seed
    attack_overrides = {
        "eval.attacks": getattr(args, "attack", None),
        "eval.eps": getattr(args, "eps", None),
        "eval.steps": getattr(args, "steps", None),
        "eval.step_size": getattr(args, "step_size", None),
        "eval.loss_target": getattr(args, "loss_target", None),
        "eval.mode": getattr(args, "mode", None),
    }
    flat.update({k: v for k, v in attack_overrides.items() if v is not None})
    return harness.ExperimentConfig.from_flat(flat)


def _load(path, kind=None):
    model, header = load_checkpoint(path)
    if kind is not None and not isinstance(model, kind):
        raise SystemExit(f"{path}: expected a {kind.__name__} checkpoint, found {header['kind']}")
    return model


def _finish(problems: list[str]) -> int:
    for p in problems:
        print(f"self-check failed: {p}", file=sys.stderr)
    return 1 if problems else 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    train_set, _ = harness.load_datasets(cfg)
    problems = []
    for name, seed in (("baseline", cfg.train.seed), ("surrogate", cfg.surrogate_seed)):
        net = harness.pretrain(cfg, train_set, seed)
        path = save_checkpoint(out / f"{name}.npz", net, seed=seed)
        with ad.no_grad():
            logits = net.forward(train_set.inputs).data
        acc = float(np.mean(np.argmax(logits, axis=-1) == train_set.labels))
        print(f"{name}: train accuracy {acc:.4f} -> {path}")
        if not 0.0 <= acc <= 1.0:
            problems.append(f"{name} accuracy out of range")
    return _finish(problems)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    train_set, _ = harness.load_datasets(cfg)
    baseline = _load(args.baseline, BaselineNet) if args.baseline else None
    net, history = harness.build_victim(cfg, train_set, baseline)
    path = save_checkpoint(out / "victim.npz", net, seed=cfg.train.seed)
    (out / "history.json").write_text(json.dumps(history, indent=2, sort_keys=True) + "\n")
    print(f"victim -> {path}")
    problems = [f"non-finite loss at epoch {h['epoch']}" for h in history if not np.isfinite(h["loss"])]
    return _finish(problems)


def cmd_attack(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    _, test_set = harness.load_datasets(cfg)
    model = _load(args.surrogate or args.victim)
    problems = []
    for spec in cfg.attacks:
        rng = RngStream(cfg.train.seed).child(harness.hash_label(harness.condition_label(spec)))
        x_adv = run_attack(model, test_set.inputs, test_set.labels, spec, rng, batch_size=256)
        if not harness.check_ball(x_adv, test_set.inputs, spec.eps):
            problems.append(f"{harness.condition_label(spec)} left the eps-ball or [0, 1]")
        path = out / f"adv_{spec.family}_{spec.eps:.6g}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, inputs=x_adv, labels=test_set.labels)
        print(f"{harness.condition_label(spec)} -> {path}")
    return _finish(problems)


def _victim_and_surrogate(args, cfg):
    victim = _load(args.victim, EnsembleNet)
    surrogate = None
    if cfg.mode == "transfer":
        if args.surrogate:
            surrogate = _load(args.surrogate)
        else:
            train_set, _ = harness.load_datasets(cfg)
            surrogate = harness.pretrain(cfg, train_set, cfg.surrogate_seed)
    return victim, surrogate


def cmd_eval(args) -> int:
    cfg = _config(args)
    _, test_set = harness.load_datasets(cfg)
    victim, surrogate = _victim_and_surrogate(args, cfg)
    cache = harness.AdversarialCache()
    table = harness.run_attack_eval(victim, cfg, test_set, surrogate, cache)
    harness.emit_report(table, {}, args.out_dir, cfg.echo(), cfg.train.seed)
    print(harness.metrics_csv(table), end="")
    return _finish(harness.self_check(table, {}, len(test_set)))


def cmd_dynamics(args) -> int:
    cfg = _config(args)
    _, test_set = harness.load_datasets(cfg)
    victim, surrogate = _victim_and_surrogate(args, cfg)
    hists = harness.run_dynamics_report(victim, cfg, test_set, surrogate)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"seed": cfg.train.seed, "config": cfg.echo(),
           "histograms": {k: [int(c) for c in h.counts] for k, h in hists.items()}}
    (out / "dynamics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for k, h in hists.items():
        print(k, " ".join(str(int(c)) for c in h.counts))
    problems = [f"histogram {k} sums to {h.total}" for k, h in hists.items() if h.total != len(test_set)]
    return _finish(problems)


def cmd_report(args) -> int:
    cfg = _config(args)
    victim = _load(args.victim, EnsembleNet) if args.victim else None
    surrogate = _load(args.surrogate) if args.surrogate else None
    result = harness.run_experiment(cfg, args.out_dir, victim=victim, surrogate=surrogate)
    print(harness.metrics_csv(result.table), end="")
    return _finish(result.problems)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynsel", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="runs"):
        p.add_argument("--config", help="flat JSON key-value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", "--out", dest="out_dir", default=out_default)

    def attack_flags(p):
        p.add_argument("--attack", help="comma-separated attack families")
        p.add_argument("--eps", type=float, nargs="+")
        p.add_argument("--steps", type=int)
        p.add_argument("--step-size", type=float)
        p.add_argument("--loss-target", choices=["ensemble-average", "dsc-fused", "single-member",
                                                 "avg", "dsc", "member"])
        p.add_argument("--mode", choices=["transfer", "white-box"])
        p.add_argument("--surrogate", help="surrogate checkpoint (transfer mode)")

    p = sub.add_parser("pretrain", help="train the baseline and the transfer surrogate")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune the evidential ensemble")
    common(p)
    p.add_argument("--baseline", help="pretrained baseline checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="write adversarial test sets")
    common(p)
    attack_flags(p)
    p.add_argument("--victim", help="model to attack when no surrogate is given")
    p.set_defaults(func=cmd_attack)

    for name, func, text in (("eval", cmd_eval, "policy-grid accuracy and Proportion"),
                             ("dynamics", cmd_dynamics, "minimum-entropy selection histograms")):
        p = sub.add_parser(name, help=text)
        common(p)
        attack_flags(p)
        p.add_argument("--victim", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="full pipeline: pretrain, train, eval, dynamics, report")
    common(p)
    attack_flags(p)
    p.add_argument("--victim")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "attack" and not (args.surrogate or args.victim):
        parser.error("attack needs --surrogate or --victim")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
