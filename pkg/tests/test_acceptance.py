"""End-to-end acceptance suite.

The benchmark criteria share one set of trained runs: the default synthetic
dataset (seed 7) and ``train --epochs 30`` for every variant and model seeds
7, 8 and 9, all driven through the command-line entry point.
"""
import csv
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from dqmil import numerics as nx
from dqmil.checkpoint import encode_checkpoint, decode_checkpoint, load_checkpoint
from dqmil.cli import main, temperature_sweep
from dqmil.data import decode_bag, encode_bag, read_manifest
from dqmil.loss import LossWeights, self_distillation_loss
from dqmil.metrics import normalize_scores, predict, witness_recovery
from dqmil.model import DQModel
from dqmil.optim import OptimConfig, radam_rho

from conftest import (check_model_gradients, jitter, record_criterion, toy_bag, toy_config, tree_digest)
from test_loss import _out
from test_model import GOLDEN, FIELDS, _golden_model, eq2_oracle
from test_optim import GRADS, run_optimizer, scalar_radam_lookahead

SEEDS = (7, 8, 9)
VARIANTS = ("mil-only", "perceiver-only", "dq-ce", "dq-sd")


class Runs:
    """Lazily trained CLI runs, shared by every benchmark criterion."""

    def __init__(self, root: Path):
        self.root = root
        self.manifest = root / "data" / "manifest.jsonl"
        assert main(["gen-data", "--out", str(root / "data")]) == 0
        self.dataset = read_manifest(self.manifest)
        self.test = self.dataset.subset("test")
        self._cache = {}

    def get(self, variant, seed):
        key = (variant, seed)
        if key not in self._cache:
            out = self.root / f"{variant}_{seed}"
            start = time.perf_counter()
            code = main(["train", "--manifest", str(self.manifest), "--out", str(out), "--variant", variant,
                         "--epochs", "30", "--seed", str(seed)])
            seconds = time.perf_counter() - start
            assert code == 0
            with nx.precision("float32"):
                model = load_checkpoint(out / "model.dqml")
            report = json.loads((out / "test_report.json").read_text())
            self._cache[key] = dict(model=model, report=report, seconds=seconds, dir=out)
        return self._cache[key]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def _spread(values):
    values = np.asarray(values, dtype=float)
    return f"{values.mean():.4f} [{values.min():.4f}, {values.max():.4f}]"


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------

def test_criterion_01_end_to_end_gradients():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for i in range(20):
        heads, d_k = int(rng.choice([1, 2])), int(rng.choice([2, 4, 8]))
        cfg = toy_config(n_sources=int(rng.integers(1, 4)), width=int(rng.integers(2, 13)),
                         d_proj=int(rng.integers(2, 9)), M=int(rng.integers(1, 5)), d_k=d_k, heads=heads, J=1,
                         K=int(rng.integers(2, 4)))
        model = DQModel(cfg, seed=i)
        jitter(model, i)
        src = toy_bag(cfg, int(rng.integers(1, 9)), seed=i)
        y = int(rng.integers(0, cfg.num_classes))
        # the undetached objective is the one whose exact derivative backward() must reproduce
        weights = LossWeights(detach_teacher=False)
        errs = check_model_gradients(model, lambda: self_distillation_loss(model(src), y, weights).total,
                                     max_coords=12, seed=i)
        worst = max(worst, max(errs.values()))
    seconds = time.perf_counter() - start
    record_criterion(1, worst < 1e-4 and seconds < 60,
                     f"max relative error {worst:.2e} (< 1e-4) over 20 configs in {seconds:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 2, 3, 7, 8. synthetic benchmark
# ---------------------------------------------------------------------------

def test_criterion_02_synthetic_benchmark(runs):
    results = [runs.get("dq-sd", s) for s in SEEDS]
    aucs = [r["report"]["auc"] for r in results]
    accs = [r["report"]["accuracy"] for r in results]
    secs = [r["seconds"] for r in results]
    ok = min(aucs) >= 0.95 and min(accs) >= 0.90 and max(secs) < 300
    record_criterion(2, ok, f"dq-sd test AUC {_spread(aucs)} (>= 0.95), accuracy {_spread(accs)} (>= 0.90), "
                            f"train time {_spread(secs)}s (< 300s)")


def test_criterion_03_variant_ablation(runs):
    aucs = {v: [runs.get(v, s)["report"]["auc"] for s in SEEDS] for v in VARIANTS}
    means = {v: float(np.mean(a)) for v, a in aucs.items()}
    floor_ok = all(min(a) >= 0.85 for a in aucs.values())
    order_ok = means["dq-sd"] >= min(means["mil-only"], means["perceiver-only"])
    detail = ", ".join(f"{v} {_spread(a)}" for v, a in aucs.items())
    record_criterion(3, floor_ok and order_ok,
                     f"test AUC per variant: {detail}; every run >= 0.85: {floor_ok}; "
                     f"mean dq-sd >= min(mil-only, perceiver-only): {order_ok}")


def test_criterion_07_localization(runs):
    recoveries, baselines = [], []
    for s in SEEDS:
        _, attention = predict(runs.get("dq-sd", s)["model"], runs.test)
        r, b = witness_recovery(attention, [bag.flags for bag in runs.test])
        recoveries.append(r)
        baselines.append(b)
    ratio = np.mean(recoveries) / np.mean(baselines)
    record_criterion(7, ratio >= 3.0, f"witness recovery {_spread(recoveries)} vs uniform baseline "
                                      f"{np.mean(baselines):.4f}: {ratio:.2f}x (>= 3x)")


def test_trained_attention_prefers_witnesses(runs):
    model = runs.get("dq-sd", SEEDS[0])["model"]
    positives = [b for b in runs.test if b.flags.any()]
    _, attention = predict(model, positives)
    wit, rest = [], []
    for bag, a in zip(positives, attention):
        norm = normalize_scores(a)
        wit.append(norm[bag.flags].mean())
        rest.append(norm[~bag.flags].mean())
    assert np.mean(wit) > np.mean(rest)


def test_criterion_08_temperature_mechanics(runs):
    fixed = runs.get("dq-sd", SEEDS[0])["model"]
    taus = [8.0, 1.0, 1 / 8, 1 / 16]
    with nx.precision("float64"):
        model = DQModel(fixed.config, seed=0)
        for p, q in zip(model.parameters(), fixed.parameters()):
            p.data = q.data.astype(np.float64)
        entropies, agree = temperature_sweep(model, runs.test, taus)
    monotone = all(b <= a for a, b in zip(entropies, entropies[1:]))
    shown = ", ".join(f"tau={t:g}: {h:.4f}" for t, h in zip(taus, entropies))
    record_criterion(8, monotone and agree, f"mean attention entropy {shown}; non-increasing: {monotone}; "
                                            f"rankings identical: {agree}")


# ---------------------------------------------------------------------------
# 4, 5, 6. exact properties
# ---------------------------------------------------------------------------

def test_criterion_04_eq2_oracle():
    cfg = toy_config(width=10, M=4, d_k=8, heads=2, J=1)
    model = DQModel(cfg, seed=4)
    jitter(model, 4)
    rng = np.random.default_rng(4)
    worst = 0.0
    for b in range(100):
        src = toy_bag(cfg, int(rng.integers(1, 40)), seed=1000 + b)
        t_mil, a = eq2_oracle(model, src, cfg.tau)
        out = model(src)
        worst = max(worst, float(np.abs(out.t_mil.data - t_mil).max()), float(np.abs(out.attention.data - a).max()))
    record_criterion(4, worst < 1e-6, f"max |t_mil - oracle|, |a - oracle| = {worst:.2e} over 100 bags (< 1e-6)")


def test_criterion_05_permutation_invariance():
    cfg = toy_config(n_sources=2, width=6, M=4, d_k=8, heads=2, J=1, K=3)
    model = DQModel(cfg, seed=5)
    jitter(model, 5)
    fields = ("t_sa", "t_mil", "p_sa", "p_mil", "p")

    def deviation(src, perm):
        base, out = model(src), model([s[perm] for s in src])
        d = max(float(np.abs(getattr(out, f).data - getattr(base, f).data).max()) for f in fields)
        return max(d, float(np.abs(out.attention.data - base.attention.data[perm]).max()))

    src5 = toy_bag(cfg, 5, seed=5)
    worst5 = max(deviation(src5, list(p)) for p in itertools.permutations(range(5)))
    rng = np.random.default_rng(5)
    src100 = toy_bag(cfg, 100, seed=6)
    worst100 = max(deviation(src100, rng.permutation(100)) for _ in range(50))
    worst = max(worst5, worst100)
    record_criterion(5, worst < 1e-6, f"max deviation {worst5:.2e} over all 120 permutations at N=5, "
                                      f"{worst100:.2e} over 50 random permutations at N=100 (< 1e-6)")


def test_criterion_06_loss_identities(runs):
    w = LossWeights()
    worst, steps = 0.0, 0
    for s in SEEDS:
        with open(runs.get("dq-sd", s)["dir"] / "steps.csv") as fh:
            for row in csv.DictReader(fh):
                total = float(row["total"])
                parts = (float(row["ce_sa"]) + w.alpha * float(row["ce_mil"]) + (1 - w.alpha) * float(row["kl"])
                         + w.lam * float(row["hint"]))
                worst = max(worst, abs(total - parts) / max(1.0, abs(total)))
                steps += 1
    zero = self_distillation_loss(_out([1.0, 0.0], [1.0, 0.0], [0.3, 0.1], [0.3, 0.1]), 0).total.item()
    p = [0.35, 0.65]
    collapsed = self_distillation_loss(_out(p, p, [1.0, 2.0], [1.0, 2.0]), 1).total.item()
    exact = zero == 0.0 and collapsed == 1.7 * -math.log(0.65)
    record_criterion(6, worst < 1e-6 and exact,
                     f"decomposition residual {worst:.2e} over {steps} logged steps (< 1e-6); "
                     f"zero-loss = {zero}, collapsed = 1.7 CE: {collapsed == 1.7 * -math.log(0.65)}")


# ---------------------------------------------------------------------------
# 9, 10. determinism, formats, optimizer
# ---------------------------------------------------------------------------

def test_criterion_09_determinism_and_formats(tmp_path):
    gen = ["--bags", "24", "--n-min", "4", "--n-max", "8", "--widths", "6", "--d-proj", "16", "--seed", "9"]
    for d in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / d), *gen]) == 0
    data_same = tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    small = ["--dim", "16", "--d-k", "8", "--heads", "2", "--latents", "4", "--depth", "1", "--epochs", "2"]
    for r in ("r1", "r2"):
        assert main(["train", "--manifest", str(tmp_path / "a" / "manifest.jsonl"), "--out", str(tmp_path / r),
                     *small]) == 0
    ckpt = (tmp_path / "r1" / "model.dqml").read_bytes()
    ckpt_same = ckpt == (tmp_path / "r2" / "model.dqml").read_bytes()

    bag_ok = all(encode_bag(decode_bag(f.read_bytes())) == f.read_bytes()
                 for f in sorted((tmp_path / "a" / "bags").iterdir()))
    with nx.precision("float32"):
        ckpt_ok = encode_checkpoint(load_checkpoint(tmp_path / "r1" / "model.dqml"),
                                    {k: v for k, v in decode_checkpoint(ckpt)[0].items() if k != "model"}) == ckpt

    model, src = _golden_model()
    out = model(src)
    golden = np.load(GOLDEN)
    golden_ok = all(getattr(out, f).data.tobytes() == golden[f].tobytes() for f in FIELDS)

    ok = data_same and ckpt_same and bag_ok and ckpt_ok and golden_ok
    record_criterion(9, ok, f"data trees identical: {data_same}; checkpoints identical: {ckpt_same}; "
                            f"DQBG round trip: {bag_ok}; checkpoint round trip: {ckpt_ok}; golden forward: {golden_ok}")


def test_criterion_10_optimizer_oracle():
    worst = 0.0
    for beta2 in (0.999, 0.9):
        cfg = OptimConfig(lr=0.05, weight_decay=0.01, beta2=beta2)
        got = run_optimizer(1.3, GRADS, cfg)
        want = scalar_radam_lookahead(1.3, GRADS, 0.05, 0.01, 0.9, beta2, 1e-8, 5, 0.5)
        worst = max(worst, max(abs(a - b) for a, b in zip(got, want)))
    momentum_branch = radam_rho(1, 0.999) <= 4
    first = run_optimizer(0.0, [1.0], OptimConfig(weight_decay=0.0))[0]
    step_ok = abs(first - (-2e-4)) < 1e-18
    record_criterion(10, worst < 1e-12 and momentum_branch and step_ok,
                     f"10-step trajectory max deviation {worst:.1e} (< 1e-12); rho_1 <= 4: {momentum_branch}; "
                     f"first step with g=1 is -lr: {step_ok}")
