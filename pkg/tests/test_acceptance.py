"""Acceptance criteria 1-11, each reported as one PASS/FAIL line.

Criteria 8-10 share one seeded two-moons experiment (module fixture).
"""

import itertools
import math
import time

import mpmath
import numpy as np
import pytest

from dynsel import autodiff as ad
from dynsel import harness
from dynsel.attacks import AttackSpec, fgsm, pgd, project, run_attack
from dynsel.autodiff import Tensor, finite_diff_check
from dynsel.diversity import factor_vectors, min_pairwise_distance
from dynsel.ensemble import (Architecture, BaselineNet, init_from_pretrained, materialize_member,
                             plain_forward)
from dynsel.evidential import dirichlet_entropy, elbo_loss, expected_nll, kl_to_uniform, one_hot
from dynsel.fusion import SubjectiveOpinion, dsc_combine, dsc_fuse_all
from dynsel.numerics import RngStream, digamma, lgamma, sample_dirichlet
from dynsel.training import (TrainConfig, make_optimizers, train_step,
                             uncertainty_correction_loss)

pytestmark = pytest.mark.slow

ROBUSTNESS_CONFIG = {
    "epochs": 20, "seed": 0, "adv.eps": 0.1, "init_scale": 0.3, "diversity.weight": 0.3,
    "eval.attacks": "pgd", "eval.eps": [0.1], "eval.steps": 20,
    "pretrain.epochs": 100, "pretrain.lr": 0.05, "data.n_test": 1000,
}


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


@pytest.fixture(scope="module")
def robustness_run():
    cfg = harness.ExperimentConfig.from_flat(ROBUSTNESS_CONFIG)
    start = time.perf_counter()
    result = harness.run_experiment(cfg)
    return result, time.perf_counter() - start


def test_01_special_functions(verdict):
    grid = np.linspace(0.1, 50.0, 200)
    ref_lg = np.array([float(mpmath.loggamma(mpmath.mpf(float(x)))) for x in grid])
    ref_dg = np.array([float(mpmath.digamma(mpmath.mpf(float(x)))) for x in grid])
    start = time.perf_counter()
    lg, dg = lgamma(grid), digamma(grid)
    elapsed = time.perf_counter() - start
    err = max(np.abs(lg - ref_lg).max(), np.abs(dg - ref_dg).max())
    ok = verdict(1, len(grid) == 200 and err < 1e-8 and elapsed < 1.0,
                 f"max abs err {err:.2e} over {len(grid)} points in {elapsed * 1e3:.1f} ms")
    assert ok


def _log_dir_pdf(mu, alpha):
    norm = math.lgamma(alpha.sum()) - sum(math.lgamma(v) for v in alpha)
    return norm + ((alpha - 1.0) * np.log(mu)).sum(axis=-1)


def _within(value, samples, k=3.0):
    se = samples.std(ddof=1) / math.sqrt(len(samples))
    return abs(value - samples.mean()) <= k * se


def test_02_dirichlet_closed_forms(verdict):
    rng = RngStream(2024)
    start = time.perf_counter()
    checks = failures = 0
    for n in (2, 3, 10):
        for _ in range(10):
            alpha = rng.uniform(1.0, 10.0, size=n)
            c = int(rng.integers(0, n))
            mu = sample_dirichlet(alpha, rng, size=50_000)
            h = float(dirichlet_entropy(alpha).data)
            nll = float(expected_nll(alpha, c).data)
            tilde = alpha.copy()
            tilde[c] = 1.0
            mu_t = sample_dirichlet(tilde, rng, size=50_000)
            kl = float(kl_to_uniform(alpha, one_hot(np.array(c), n)).data)
            kl_samples = _log_dir_pdf(mu_t, tilde) - math.lgamma(n)
            for value, samples in ((h, -_log_dir_pdf(mu, alpha)), (nll, -np.log(mu[:, c])), (kl, kl_samples)):
                checks += 1
                failures += not _within(value, samples)
    elapsed = time.perf_counter() - start
    ok = verdict(2, failures == 0 and elapsed < 30.0,
                 f"{checks - failures}/{checks} within 3 SE (30 alphas, 50k samples) in {elapsed:.1f} s")
    assert ok


def test_03_autodiff(verdict):
    rng = RngStream(3)
    unary = {
        "exp": (ad.exp, (-1, 1)), "log": (ad.log, (0.5, 2)), "relu": (ad.relu, (0.1, 1)),
        "sigmoid": (ad.sigmoid, (-3, 3)), "softplus": (ad.softplus, (-3, 3)), "abs": (ad.abs_, (0.1, 1)),
        "clamp": (lambda t: ad.clamp(t, 0.0, 0.5), (0.1, 0.4)), "lgamma": (ad.lgamma, (0.5, 5)),
        "digamma": (ad.digamma, (0.5, 5)), "power": (lambda t: ad.power(t, 3.0), (0.5, 1.5)),
        "log_softmax": (lambda t: ad.log_softmax(t, axis=-1), (-2, 2)),
        "sum": (lambda t: t.sum(axis=0), (-1, 1)), "mean": (lambda t: t.mean(axis=-1), (-1, 1)),
        "max": (lambda t: t.max(axis=-1), (-1, 1)), "reshape": (lambda t: t.reshape(-1), (-1, 1)),
        "concat": (lambda t: ad.concat([t, t * 2.0], axis=-1), (-1, 1)),
    }
    worst = {}
    for name, (f, (lo, hi)) in unary.items():
        x = rng.uniform(lo, hi, size=(3, 4))
        w = rng.normal(size=f(Tensor(x)).shape)
        worst[name] = finite_diff_check(lambda t: (f(t) * w).sum(), x, 1e-6)
    other = rng.uniform(0.5, 2.0, size=(4,))
    for name, op in (("add", ad.add), ("mul", ad.mul), ("div", ad.div)):
        x = rng.uniform(0.5, 2.0, size=(3, 4))
        worst[name] = max(finite_diff_check(lambda t: (op(t, other) ** 2).sum(), x, 1e-6),
                          finite_diff_check(lambda t: (op(x, t) ** 2).sum(), other, 1e-6))
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    worst["matmul"] = max(finite_diff_check(lambda t: (ad.matmul(t, b) ** 2).sum(), a, 1e-6),
                          finite_diff_check(lambda t: (ad.matmul(a, t) ** 2).sum(), b, 1e-6))
    img, ker = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    worst["conv2d"] = max(finite_diff_check(lambda t: (ad.conv2d(t, ker, padding=1) ** 2).sum(), img, 1e-6),
                          finite_diff_check(lambda t: (ad.conv2d(img, t) ** 2).sum(), ker, 1e-6))

    base = BaselineNet.init(Architecture(n_classes=3, in_dim=2, hidden=(6,)), RngStream(30))
    net = init_from_pretrained(base, 3, 2, RngStream(31), init_scale=0.3)
    x = rng.uniform(size=(5, 2))
    x_adv = np.clip(x + 0.05, 0.0, 1.0)
    y = rng.integers(0, 3, size=5)
    slots = [(f"shared.{i}.W", layer.__dict__, "W") for i, layer in enumerate(net.shared)]
    for attr in ("r", "s", "bias"):
        slots += [(f"member.{i}.{attr}", getattr(net, attr), i) for i in range(len(net.shared))]
    for key, holder, slot in slots:
        def objective(t, holder=holder, slot=slot):
            saved = holder[slot]
            holder[slot] = t
            try:
                alpha = net.member_alpha(np.concatenate([x, x_adv]))
                benign, adv = alpha[:, :5], alpha[:, 5:]
                return (elbo_loss(benign, np.broadcast_to(y, (3, 5)), 1.0).total * 3.0
                        - uncertainty_correction_loss(benign, adv, y, 8.0))
            finally:
                holder[slot] = saved
        worst[f"objective:{key}"] = finite_diff_check(objective, holder[slot].data.copy(), 1e-6)
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = verdict(3, err < 1e-4, f"{len(worst)} checks, worst {name} rel err {err:.2e}")
    assert ok


def test_04_ensemble_equivalence(verdict):
    worst = 0.0
    for seed in range(100):
        rng = RngStream(seed)
        hidden = tuple(int(h) for h in rng.integers(2, 9, size=int(rng.integers(1, 3))))
        arch = Architecture(n_classes=int(rng.integers(2, 5)), in_dim=int(rng.integers(2, 6)), hidden=hidden)
        net = init_from_pretrained(BaselineNet.init(arch, rng.child(1)), int(rng.integers(1, 5)),
                                   int(rng.integers(1, 4)), rng.child(2), init_scale=0.5)
        x = rng.uniform(size=(6, arch.in_dim))
        grouped = net.grouped_forward(x).data
        for m in range(net.n_members):
            worst = max(worst, float(np.abs(grouped[m] - plain_forward(arch, materialize_member(net, m), x)).max()))
    ok = verdict(4, worst < 1e-6, f"max abs diff {worst:.2e} over 100 random nets")
    assert ok


def test_05_attack_invariants(verdict):
    arch = Architecture(n_classes=3, in_dim=4, hidden=(16,))
    net = init_from_pretrained(BaselineNet.init(arch, RngStream(50)), 3, 2, RngStream(51), init_scale=0.3)
    rng = RngStream(52)
    x = rng.uniform(size=(200, 4))
    x[:20] = np.round(x[:20])  # box corners
    y = rng.integers(0, 3, size=200)
    total = inside = 0
    for family, eps in itertools.product(("fgsm", "pgd", "mim", "cw"), (0.0, 8 / 255, 0.1, 0.3)):
        adv = run_attack(net, x, y, AttackSpec(family, eps=eps, steps=10), rng.child(hash(family) % 997))
        ok_rows = (np.abs(adv - x).max(axis=1) <= eps) & np.all((adv >= 0) & (adv <= 1), axis=1)
        total += len(x)
        inside += int(ok_rows.sum())
    a = fgsm(net, x, y, AttackSpec("fgsm", eps=0.1))
    b = pgd(net, x, y, AttackSpec("pgd", eps=0.1, steps=1, step_size=0.1, random_init=False))
    bitwise = np.array_equal(a, b)

    corner_ok = 0
    for i in range(50):
        W, bias = rng.normal(size=(3, 2)), rng.normal(size=2)
        lin = BaselineNet(Architecture(n_classes=2, in_dim=3, hidden=()), [Tensor(W, requires_grad=True)],
                          [Tensor(bias, requires_grad=True)])
        xi = rng.uniform(0.1, 0.9, size=(1, 3))
        yi = np.array([int(rng.integers(0, 2))])
        adv = fgsm(lin, xi, yi, AttackSpec("fgsm", eps=0.05))
        corners = [project(xi + 0.05 * np.array(s), xi, 0.05) for s in itertools.product((-1.0, 1.0), repeat=3)]

        def ce(z):
            with ad.no_grad():
                p = lin.member_probs(z).data.mean(axis=0)
            return -math.log(p[0, yi[0]])
        corner_ok += np.array_equal(adv, max(corners, key=ce))
    ok = verdict(5, inside == total and bitwise and corner_ok == 50,
                 f"{inside}/{total} in ball and box; PGD(1)==FGSM bitwise: {bitwise}; corner search {corner_ok}/50")
    assert ok


def _dempster(masses):
    def combine(m1, m2):
        out, conflict = {}, 0.0
        for (a, x), (b, y) in itertools.product(m1.items(), m2.items()):
            if a & b:
                out[a & b] = out.get(a & b, 0.0) + x * y
            else:
                conflict += x * y
        return {k: v / (1.0 - conflict) for k, v in out.items()}
    fused = masses[0]
    for m in masses[1:]:
        fused = combine(fused, m)
    return fused


def test_06_dsc_algebra(verdict):
    rng = RngStream(6)
    neutral = comm = shrink = 0
    for _ in range(1000):
        n = int(rng.integers(2, 6))
        a = SubjectiveOpinion.from_alpha(rng.uniform(1, 20, size=n))
        b = SubjectiveOpinion.from_alpha(rng.uniform(1, 20, size=n))
        v = dsc_combine(a, SubjectiveOpinion.vacuous(n))
        neutral += np.abs(v.belief - a.belief).max() < 1e-12 and abs(float(v.u) - float(a.u)) < 1e-12
        ab, ba = dsc_combine(a, b), dsc_combine(b, a)
        comm += np.abs(ab.belief - ba.belief).max() < 1e-12 and abs(float(ab.u) - float(ba.u)) < 1e-12
        shrink += float(ab.u) <= min(float(a.u), float(b.u)) + 1e-15
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 5))
        ops = [SubjectiveOpinion.from_alpha(rng.uniform(1, 10, size=n)) for _ in range(3)]
        masses = [{**{frozenset([k]): float(o.belief[k]) for k in range(n)}, frozenset(range(n)): float(o.u)}
                  for o in ops]
        ref = _dempster(masses)
        fused = dsc_fuse_all(ops)
        worst = max(worst, abs(float(fused.u) - ref.get(frozenset(range(n)), 0.0)),
                    max(abs(float(fused.belief[k]) - ref.get(frozenset([k]), 0.0)) for k in range(n)))
    ok = verdict(6, neutral == comm == shrink == 1000 and worst < 1e-9,
                 f"neutral {neutral}/1000, commutative {comm}/1000, u-shrink {shrink}/1000, "
                 f"3-member fold err {worst:.1e}")
    assert ok


def _train_steps(weight, init_scale, steps=100, seed=7):
    base = BaselineNet.init(Architecture(n_classes=2, in_dim=2, hidden=(16,)), RngStream(seed))
    net = init_from_pretrained(base, 4, 2, RngStream(seed + 1), init_scale=init_scale)
    cfg = TrainConfig.from_flat({"seed": seed, "adv.steps": 3, "adv.eps": 0.05, "diversity.weight": weight})
    opts = make_optimizers(net, cfg)
    rng = RngStream(seed + 2)
    data = harness.load_datasets(harness.ExperimentConfig.from_flat({"data.n_train": 640}))[0]
    for step in range(steps):
        idx = np.arange(step * 32, step * 32 + 32) % len(data)
        train_step(net, (data.inputs[idx], data.labels[idx]), cfg, rng, opts)
    return net


def test_07_diversity(verdict):
    sym = _train_steps(0.0, 0.0)
    identical = all(np.array_equal(t.data[m], t.data[0]) for t in sym.factor_parameters()
                    for m in range(1, sym.n_members))
    d0 = min_pairwise_distance(factor_vectors(_train_steps(0.0, 0.1)))
    d1 = min_pairwise_distance(factor_vectors(_train_steps(1.0, 0.1)))
    ok = verdict(7, identical and d1 > d0,
                 f"lambda=0 symmetric members bitwise identical after 100 steps: {identical}; "
                 f"min factor distance lambda=1 {d1:.5f} vs lambda=0 {d0:.5f}")
    assert ok


def test_08_margin(verdict, robustness_run):
    result, _ = robustness_run
    gaps = [h["entropy_gap"] for h in result.history[:5]]
    monotone = all(b >= a for a, b in zip(gaps, gaps[1:]))
    gamma = 8.0
    bounded = max(h["entropy_gap"] for h in result.history) <= gamma
    benign = np.full((3, 1, 2), 1.0)
    adv = np.full((3, 1, 2), 1.0)
    adv[..., 0] = 1e12
    reward = float(uncertainty_correction_loss(benign, adv, np.array([0]), gamma).data)
    clamp_exact = abs(reward - 3 * gamma) < 1e-9
    ok = verdict(8, monotone and bounded and clamp_exact,
                 f"gap over epochs 0-4 {[round(g, 4) for g in gaps]}; max gap <= {gamma}: {bounded}; "
                 f"unit clamp {reward:.12f} == {3 * gamma}")
    assert ok


def test_09_directional_robustness(verdict, robustness_run):
    result, elapsed = robustness_run
    t = result.table
    acc = {p: t.accuracy(p, "pgd", 0.1) for p in ("uncertain-1", "average", "stochastic-2")}
    benign = t.accuracy("uncertain-1", "none", 0.0)
    ok = verdict(9, acc["uncertain-1"] >= acc["average"] >= acc["stochastic-2"]
                 and acc["uncertain-1"] >= acc["stochastic-2"] and benign >= 0.9 and elapsed < 600,
                 f"robust acc u1 {acc['uncertain-1']:.3f}, avg {acc['average']:.3f}, "
                 f"st2 {acc['stochastic-2']:.3f}; benign u1 {benign:.3f}; {elapsed:.0f} s")
    assert ok


def test_10_dynamics(verdict, robustness_run):
    result, _ = robustness_run
    benign = result.histograms["benign"]
    attacked = result.histograms["pgd@0.1"]
    nonzero = int(np.count_nonzero(benign.counts))
    tv = benign.tv_distance(attacked)
    ok = verdict(10, nonzero >= 2 and tv > 0.05,
                 f"benign {benign.counts.tolist()}, pgd {attacked.counts.tolist()}, TV {tv:.3f}")
    assert ok


def test_11_reproducibility(verdict, tmp_path):
    flat = {"epochs": 2, "data.n_train": 300, "data.n_test": 100, "pretrain.epochs": 10, "adv.steps": 3,
            "eval.attacks": "fgsm,pgd", "eval.eps": [0.05], "eval.steps": 5}
    for name in ("a", "b"):
        harness.run_experiment(harness.ExperimentConfig.from_flat(flat), tmp_path / name)
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("metrics.csv", "histograms.csv", "report.json")}
    ok = verdict(11, all(same.values()), f"byte-identical: {same}")
    assert ok
