"""Acceptance gate: one test per criterion, each recording a pass/fail line.

The experiment criteria run the bundled configs in ``experiments/`` end to end
(data generation, training, attack, evaluation, report), so this module takes
several minutes on a single core.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from attrcloak import autodiff as ad
from attrcloak.anonymize import AttackSpec, init_perturbation, reparameterize, run_attack
from attrcloak.metrics import cmc_curve, roc_curve
from attrcloak.models import eer_threshold
from attrcloak.pipeline import load_config_file, resolve_config, run_experiment
from attrcloak.tensorio import load_tensor

from gradcheck import central_difference, gradient_errors, random_program
from oracles import brute_force_auc, brute_force_eer
from toys import logistic_grid_optimum, logistic_net, logistic_sample, objective_and_gradient, objective_value, \
    small_instance

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"
REL_TOL, ABS_TOL = 1e-4, 1e-7


def _run(name: str, out: Path) -> tuple[Path, dict, float]:
    cfg = resolve_config(load_config_file(EXPERIMENTS / f"{name}.json"), {"output": str(out)})
    t0 = time.perf_counter()
    run_experiment(cfg)
    elapsed = time.perf_counter() - t0
    return out, json.loads((out / "report" / "report.json").read_text()), elapsed


@pytest.fixture(scope="module")
def case1(tmp_path_factory):
    return _run("case1_single", tmp_path_factory.mktemp("case1") / "run")


@pytest.fixture(scope="module")
def case2(tmp_path_factory):
    return _run("case2_multi5", tmp_path_factory.mktemp("case2") / "run")


@pytest.fixture(scope="module")
def case3(tmp_path_factory):
    return _run("case3_identity", tmp_path_factory.mktemp("case3") / "run")


def _anonymized(run: Path) -> list[np.ndarray]:
    return [load_tensor(p) for p in sorted((run / "attack" / "anonymized").glob("*.ten"))]


def test_criterion_1_gradients(acceptance):
    t0 = time.perf_counter()
    worst_rel = worst_abs = 0.0
    for seed in range(100):
        prog = random_program(seed)
        with ad.Tape() as tape:
            slots = prog.run(prog.leaves, tape)
            grads = tape.gradient(prog.root(slots), slots[:len(prog.leaves)])
        for a, n in zip(grads, central_difference(prog.value, prog.leaves)):
            rel, ab = gradient_errors(a, n)
            worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, ab)
    for seed in range(10):
        image, net, spec, labels, w = small_instance(seed, identity=seed % 2 == 0)
        if seed >= 8:
            spec.score_space = "logit"
            spec.confidence = 0.5
        _, g = objective_and_gradient(image, net, spec, labels, w)
        num = central_difference(lambda v: objective_value(image, net, spec, labels, v), [w])[0]
        rel, ab = gradient_errors(g, num)
        worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, ab)
    elapsed = time.perf_counter() - t0
    ok = worst_rel <= REL_TOL and worst_abs <= ABS_TOL and elapsed < 30
    acceptance(1, "gradient correctness", ok,
               f"max rel {worst_rel:.2e}, max abs {worst_abs:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_box_and_fixed_point(acceptance, case1, case2, case3):
    rng = np.random.default_rng(0)
    dev = 0.0
    for _ in range(200):
        img = rng.uniform(0, 1, (8, 8, 3))
        img.reshape(-1)[:4] = [0.0, 1.0, 1e-7, 1 - 1e-7]
        dev = max(dev, float(np.abs(reparameterize(img, init_perturbation(img)) - img).max()))
    toy = run_attack(logistic_net(), logistic_sample(), AttackSpec(suppress={0: None}, iterations=200))
    images = [toy.T] + _anonymized(case1[0]) + _anonymized(case2[0]) + _anonymized(case3[0])
    lo = min(float(t.min()) for t in images)
    hi = max(float(t.max()) for t in images)
    ok = dev <= 1e-6 and lo > 0.0 and hi < 1.0
    acceptance(2, "box and fixed point", ok,
               f"max |T0 - I| {dev:.3e}; {len(images)} emitted images, pixels in [{lo:.4f}, {hi:.4f}]")
    assert ok


def test_criterion_3_logistic_oracle(acceptance):
    t0 = time.perf_counter()
    best = logistic_grid_optimum()
    res = run_attack(logistic_net(), logistic_sample(), AttackSpec(suppress={0: None}, iterations=500))
    elapsed = time.perf_counter() - t0
    gap = abs(res.distortion - best) / best
    ok = res.success and gap <= 0.05 and elapsed < 60
    acceptance(3, "logistic oracle", ok,
               f"attack {res.distortion:.5f} vs grid {best:.5f} ({100 * gap:.2f}%), {elapsed:.1f}s")
    assert ok


def test_criterion_4_single_attribute(acceptance, case1):
    _, rep, elapsed = case1
    a = rep["attack"]
    ok = a["eligible"] >= 200 and a["success_rate"] >= 0.95 and elapsed <= 600
    acceptance(4, "case I single attribute", ok,
               f"{a['eligible']} eligible, success {100 * a['success_rate']:.1f}%, {elapsed:.0f}s")
    assert ok


def test_criterion_5_multi_attribute(acceptance, case2):
    _, rep, elapsed = case2
    attrs = rep["attack"]["attributes"]
    flips = {n: v["flip_rate"] for n, v in attrs.items() if v["role"] == "suppress"}
    kept = {n: v["retention_rate"] for n, v in attrs.items() if v["role"] == "preserve"}
    margins = {n: rep["attributes"][n]["margin_success_min"] for n in flips}
    ok = (len(flips) == 3 and len(kept) == 2 and min(flips.values()) >= 0.95 and min(kept.values()) >= 0.95
          and all(m is not None and m >= 0.1 for m in margins.values()) and elapsed <= 900)
    detail = (f"flip min {100 * min(flips.values()):.1f}%, retention min {100 * min(kept.values()):.1f}%, "
              f"margin min {min(margins.values()):.3f}, {elapsed:.0f}s")
    acceptance(5, "case II three suppressed, two preserved", ok, detail)
    assert ok


def test_criterion_6_identity(acceptance, case3):
    _, rep, elapsed = case3
    wb, ho = rep["identity"]["whitebox"], rep["identity"].get("heldout")
    ok = (wb["rank1_drop"] <= 0.05 and wb["auc_drop"] <= 0.05 and ho is not None
          and ho["auc_original"] is not None and elapsed <= 900)
    detail = (f"white-box rank-1 {wb['rank1_original']:.3f}->{wb['rank1_anonymized']:.3f}, "
              f"AUC {wb['auc_original']:.4f}->{wb['auc_anonymized']:.4f}; held-out rank-1 "
              f"{ho['rank1_original']:.3f}->{ho['rank1_anonymized']:.3f}, "
              f"AUC {ho['auc_original']:.4f}->{ho['auc_anonymized']:.4f}; "
              f"success {100 * rep['attack']['success_rate']:.1f}%, {elapsed:.0f}s")
    acceptance(6, "case III identity preservation", ok, detail)
    assert ok


def test_criterion_7_visual_quality(acceptance, case1, case2):
    p1 = case1[1]["quality"]["success"]["psnr_mean"]
    p2 = case2[1]["quality"]["success"]["psnr_mean"]
    ok = p1 >= 30 and p2 >= 30
    acceptance(7, "visual quality", ok, f"mean PSNR case I {p1:.2f} dB, case II {p2:.2f} dB")
    assert ok


def test_criterion_8_determinism(acceptance, case1, tmp_path):
    first = case1[0]
    second, _, _ = _run("case1_single", tmp_path / "rerun")
    checked, differing = 0, []
    for sub in ("report/report.json", "data", "attack"):
        for p in sorted((first / sub).rglob("*")) if (first / sub).is_dir() else [first / sub]:
            if p.is_file():
                checked += 1
                q = second / p.relative_to(first)
                if not q.is_file() or q.read_bytes() != p.read_bytes():
                    differing.append(str(p.relative_to(first)))
    ok = checked > 0 and not differing
    acceptance(8, "determinism", ok, f"{checked} files compared, {len(differing)} differ")
    assert ok, differing[:5]


def test_criterion_9_metric_oracles(acceptance):
    rng = np.random.default_rng(9)
    auc_err, eer_bad, cmc_bad = 0.0, 0, 0
    for trial in range(60):
        gen = list(np.round(rng.uniform(0, 1, rng.integers(1, 30)), 1 + trial % 3))
        imp = list(np.round(rng.uniform(0.2, 1.2, rng.integers(1, 30)), 1 + trial % 3))
        auc_err = max(auc_err, abs(roc_curve(gen, imp).auc - brute_force_auc(gen, imp)))
        th = eer_threshold(np.array(gen), np.array(imp))
        tau, eer = brute_force_eer(gen, imp)
        eer_bad += not (th.tau == tau and abs(th.eer - eer) <= 1e-12)
        g = rng.normal(size=(8, 3))
        p = g[rng.integers(0, 8, 20)] + rng.normal(0, 0.8, (20, 3))
        rates = cmc_curve(g, np.arange(8), p, [int(np.argmin(((g - x) ** 2).sum(1))) for x in p]).rates
        rates2 = cmc_curve(g, np.arange(8), p, rng.integers(0, 8, 20)).rates
        for r in (rates, rates2):
            cmc_bad += not (np.all(np.diff(r) >= 0) and r[-1] == 1.0)
    ok = auc_err <= 1e-9 and eer_bad == 0 and cmc_bad == 0
    acceptance(9, "metric oracles", ok,
               f"AUC max error {auc_err:.1e}, EER mismatches {eer_bad}, CMC violations {cmc_bad}")
    assert ok
