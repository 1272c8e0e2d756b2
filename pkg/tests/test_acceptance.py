"""Acceptance criteria 1-10, each checked at its stated tolerance.

The digits and patches pipelines run once per session through the CLI; set
COUNTERFAX_ACCEPTANCE_DIR to keep (and reuse) their outputs between sessions.
Each test prints one ``criterion N: PASS|FAIL`` line, repeated in the
terminal summary.
"""

import contextlib
import json
import os
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import gaussian_kde

from counterfax.classifier import Classifier
from counterfax.cli import main
from counterfax.config import OUTPUT_DIR_ENV, load_config
from counterfax.evaluation import (
    completeness_error,
    frechet_distance,
    iou_at_percentile,
    js_distance,
)
from counterfax.explainers import Explainer, build_explainer, domain_terms, init_opt_state, train_step
from counterfax.losses import TERM_NAMES, LossWeights, Method, compose_total, recompute_total

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
DIGITS = ROOT / "configs" / "digits.yaml"
PATCHES = ROOT / "configs" / "patches.yaml"
DIGIT_METHODS = ("SyCE", "CyCE", "CyCE_noFc")


@contextlib.contextmanager
def output_dir(path: Path):
    old = os.environ.get(OUTPUT_DIR_ENV)
    os.environ[OUTPUT_DIR_ENV] = str(path)
    try:
        yield
    finally:
        if old is None:
            os.environ.pop(OUTPUT_DIR_ENV, None)
        else:
            os.environ[OUTPUT_DIR_ENV] = old


def stage(config: Path, out: Path, command: str, marker: Path, *extra: str) -> None:
    """Run a CLI stage unless its manifest already exists."""
    if (marker / "manifest.json").is_file():
        return
    with output_dir(out):
        code = main([command, "--config", str(config), *extra])
    assert code == 0, f"{command} {extra} exited with {code}"


def _workdir(tmp_path_factory, name: str) -> Path:
    base = os.environ.get("COUNTERFAX_ACCEPTANCE_DIR")
    if base:
        path = Path(base) / name
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp(name)


def elapsed(manifest: dict) -> float:
    t = manifest["timestamps"]
    return t["finished"] - t["started"]


def read_json(path: Path) -> dict:
    return json.loads(path.read_text())


@pytest.fixture(scope="session")
def digits(tmp_path_factory):
    out = _workdir(tmp_path_factory, "digits")
    stage(DIGITS, out, "prepare-data", out / "data")
    stage(DIGITS, out, "train-classifier", out / "classifier")
    for method in DIGIT_METHODS:
        stage(DIGITS, out, "train-explainer", out / "explainers" / method, "--method", method)
        stage(DIGITS, out, "evaluate", out / "eval" / method, "--method", method)
    return out


@pytest.fixture(scope="session")
def digit_classifier(digits):
    return Classifier.load(digits / "classifier" / "classifier.npz")


@pytest.fixture(scope="session")
def digit_test_images(digits):
    with np.load(digits / "data" / "test.npz") as z:
        return z["images"]


@pytest.fixture(scope="session")
def patches(tmp_path_factory):
    out = _workdir(tmp_path_factory, "patches")
    stage(PATCHES, out, "prepare-data", out / "data")
    stage(PATCHES, out, "train-classifier", out / "classifier")
    stage(PATCHES, out, "train-explainer", out / "explainers" / "SyCE", "--method", "SyCE")
    stage(PATCHES, out, "evaluate", out / "eval" / "SyCE", "--method", "SyCE")
    return out


def report(run: Path, method: str) -> dict:
    return read_json(run / "eval" / method / "report.json")


# ---------------------------------------------------------------- 1


def test_criterion_1_classifier_quality(digits, criterion):
    m = read_json(digits / "classifier" / "manifest.json")
    cfg = load_config(DIGITS)
    minutes = elapsed(m) / 60
    ok = (m["metrics"]["auc"] >= 0.99 and m["metrics"]["accuracy"] >= 0.99
          and minutes <= 15 and cfg.classifier.train.epochs <= 10)
    criterion(1, ok, f"auc {m['metrics']['auc']:.5f} acc {m['metrics']['accuracy']:.4f} "
                     f"({cfg.classifier.train.epochs} epochs, {minutes:.1f} min)")
    assert ok


# ---------------------------------------------------------------- 2-4


def test_criterion_2_syce_attack(digits, criterion):
    acc = report(digits, "SyCE")["acc"]
    minutes = elapsed(read_json(digits / "explainers" / "SyCE" / "manifest.json")) / 60
    ok = acc["a"] <= 0.15 and acc["s"] >= 0.97 and minutes <= 60
    criterion(2, ok, f"SyCE acc_a {acc['a']:.4f} (<= 0.15) acc_s {acc['s']:.4f} (>= 0.97), {minutes:.1f} min")
    assert ok


def test_criterion_3_cyce_attack(digits, criterion):
    acc = report(digits, "CyCE")["acc"]
    ok = acc["a"] <= 0.20
    criterion(3, ok, f"CyCE acc_a {acc['a']:.4f} (<= 0.20)")
    assert ok


def test_criterion_4_ablation_ordering(digits, criterion):
    cyce = report(digits, "CyCE")["acc"]["a"]
    nofc = report(digits, "CyCE_noFc")["acc"]["a"]
    same = {read_json(digits / "explainers" / m / "manifest.json")["config"]["explainer"]["schedule"]["epochs"]
            for m in ("CyCE", "CyCE_noFc")}
    ok = nofc >= 0.5 and cyce <= 0.20 and len(same) == 1
    criterion(4, ok, f"acc_a CyCE_noFc {nofc:.4f} (>= 0.5) vs CyCE {cyce:.4f} (<= 0.20)")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_domain_translation_ordering(digits, criterion):
    details, ok = [], True
    for method in ("SyCE", "CyCE"):
        fd = report(digits, method)["fd"]
        for key in ("0to1", "1to0"):
            d = fd[key]
            ok &= d["adv"] < d["adv_source"]
            details.append(f"{method} {key} adv->target {d['adv']:.2f} < adv->source {d['adv_source']:.2f}")
            if method == "SyCE":
                ok &= d["stable"] < d["adv_source"]
                details.append(f"SyCE {key} stable->source {d['stable']:.2f}")
    criterion(5, ok, "; ".join(details))
    assert ok


# ---------------------------------------------------------------- 6


def expected_random_iou(n_pixels, mask_pixels, percentile):
    from scipy.stats import hypergeom

    k = int((np.arange(n_pixels) > np.percentile(np.arange(n_pixels), percentile)).sum())
    overlap = np.arange(min(k, mask_pixels) + 1)
    pmf = hypergeom(n_pixels, mask_pixels, k).pmf(overlap)
    return float((pmf * overlap / (k + mask_pixels - overlap)).sum())


def test_criterion_6_metric_oracles(criterion):
    rng = np.random.default_rng(6)
    fd = frechet_distance(rng.normal(size=(10000, 2)), rng.normal(size=(10000, 2)) + [1.0, 0.0])

    pts = rng.normal(size=(400, 2))
    js_same = js_distance(pts, pts)
    a = rng.normal(size=(400, 2))
    b = rng.normal(size=(400, 2))
    bw = np.sqrt(np.diag(gaussian_kde(a.T).covariance)).max()  # Scott kernel width
    js_far = js_distance(a, b + [20 * bw, 0.0])

    gt = np.zeros((28, 28), bool)
    gt[10:16, 4:10] = True
    scores = np.array([iou_at_percentile(rng.random((28, 28)), gt, 95) for _ in range(1000)])
    expected = expected_random_iou(784, 36, 95)
    two_sigma = 2 * scores.std(ddof=1) / np.sqrt(len(scores))

    ok = 0.9 <= fd <= 1.1 and abs(js_same) <= 1e-9 and js_far >= 0.98 and abs(scores.mean() - expected) <= two_sigma
    criterion(6, ok, f"FD {fd:.4f}; JS same {js_same:.1e}, separated {js_far:.4f}; "
                     f"random IoU {scores.mean():.4f} vs {expected:.4f} +- {two_sigma:.4f}")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_patch_localization(patches, criterion):
    rep = report(patches, "SyCE")
    matched = f"{rep['loc']['matched_percentile']:g}"
    iou = rep["loc"]["iou"][matched]
    base = rep["extra"]["baselines"]
    random_iou = base["random"]["iou"][matched]
    ok = iou >= 3 * random_iou and rep["loc"]["ncc"] >= 0.3 and {"gradient", "ig"} <= set(base)
    criterion(7, ok, f"SyCE IoU@{float(matched):.2f} {iou:.4f} vs 3x random {3 * random_iou:.4f}; "
                     f"NCC {rep['loc']['ncc']:.4f} (>= 0.3); gradient IoU {base['gradient']['iou'][matched]:.4f} "
                     f"NCC {base['gradient']['ncc']:.4f}; IG IoU {base['ig']['iou'][matched]:.4f} "
                     f"NCC {base['ig']['ncc']:.4f}")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_loss_identity_and_gradients(criterion):
    import test_losses as tl

    rng = np.random.default_rng(8)
    failures = []
    for method in Method:
        for _ in range(50):
            terms = dict(zip(TERM_NAMES, rng.random(7) * 100))
            weights = LossWeights(*(rng.random(9) * 10))
            b = compose_total(terms, weights, method)
            if recompute_total(b, weights, method) - b.total != 0.0:
                failures.append(f"identity {method.value}")
    for name in ("test_gradient_adversarial_classification", "test_gradient_symmetry_terms",
                 "test_gradient_cycle_terms", "test_gradient_gan_terms", "test_gradient_penalty_gradient",
                 "test_gradient_weight_proximity", "test_gradient_weighted_total_syce",
                 "test_symmetry_and_cycle_null_cases"):
        try:
            getattr(tl, name)()
        except AssertionError as exc:
            failures.append(f"{name}: {exc}")

    # null case on a real explainer: identity adversarial generators give exact zeros
    from counterfax.classifier import build_lenet
    from counterfax.nets import DiscriminatorSpec, GeneratorSpec

    ex = build_explainer(Method.SyCE, GeneratorSpec(n_scales=1, base_channels=4), DiscriminatorSpec(n_blocks=2),
                         build_lenet(28, seed=0).freeze(), LossWeights.digits(Method.SyCE))
    ex.adversarial_generator = lambda i: (lambda x: x)
    terms = domain_terms(ex, torch.rand(4, 1, 28, 28), 0)
    if float(terms["L_d_s"]) != 0.0 or float(terms["L_d_cy"]) != 0.0:
        failures.append("explainer identity null case")
    ok = not failures
    criterion(8, ok, "compose_total identity exact for all methods; term gradients vs central differences "
                     "rel 1e-3; identity null cases exact" if ok else "; ".join(failures))
    assert ok


# ---------------------------------------------------------------- 9


TINY_RUN = {
    "seed": 5,
    "dataset": {"source": "patches", "synthetic": {"n_per_class": 40}, "split": [0.6, 0.2, 0.2]},
    "classifier": {"train": {"epochs": 2, "batch_size": 32, "learning_rate": 0.001}},
    "explainer": {"method": "SyCE", "images_per_domain": 20,
                  "generator": {"n_scales": 1, "base_channels": 4},
                  "discriminator": {"n_blocks": 2, "base_channels": 4},
                  "schedule": {"epochs": 1, "batch_size": 8}},
    "evaluation": {"percentiles": [95.0], "domain_translation": False, "ig_steps": 2},
}
MANIFEST_DIRS = ("data", "classifier", "explainers/SyCE", "eval/SyCE")


def _tiny_pipeline(config: Path, out: Path) -> dict:
    with output_dir(out):
        for command in ("prepare-data", "train-classifier", "train-explainer", "evaluate"):
            assert main([command, "--config", str(config)]) == 0
    return {d: read_json(out / d / "manifest.json")["manifest_sha256"] for d in MANIFEST_DIRS}


def test_criterion_9_structural_invariants(digits, digit_classifier, digit_test_images, tmp_path, criterion):
    import yaml

    failures = []
    x = digit_test_images[:64]
    clf_hash = read_json(digits / "classifier" / "manifest.json")["artifacts"]["classifier"]
    if digit_classifier.param_hash() != clf_hash:
        failures.append("classifier checkpoint hash")

    explainers = {m: Explainer.load(digits / "explainers" / m / "explainer.npz", digit_classifier)
                  for m in DIGIT_METHODS}
    cfg = load_config(DIGITS)
    for m in (Method.SSyE, Method.CyCSAE):
        spec = cfg.explainer.generator
        explainers[m.value] = build_explainer(m, spec, cfg.explainer.discriminator, digit_classifier,
                                              LossWeights.digits(m))
    for name, ex in explainers.items():
        out = ex.explain(x)
        if out["map"].shape != x.shape or (out["map"] < 0).any():
            failures.append(f"{name} map shape/sign")
    for name in ("CyCE", "CyCE_noFc"):
        if not np.array_equal(explainers[name].stable(x), x):
            failures.append(f"{name} stable != input")

    # frozen classifier over training: manifests record the classifier hash the explainer saw
    for name in DIGIT_METHODS:
        if read_json(digits / "explainers" / name / "manifest.json")["artifacts"]["classifier"] != clf_hash:
            failures.append(f"{name} trained against a different classifier")
    ex = explainers["SSyE"]
    state = init_opt_state(ex)
    batch = torch.from_numpy(x[:4])[:, None]
    train_step(ex, batch, batch.flip(0), state)
    if digit_classifier.param_hash() != clf_hash:
        failures.append("classifier changed during train_step")

    config = tmp_path / "tiny.yaml"
    config.write_text(yaml.safe_dump(TINY_RUN))
    first = _tiny_pipeline(config, tmp_path / "run")
    shutil.rmtree(tmp_path / "run")
    second = _tiny_pipeline(config, tmp_path / "run")
    if first != second:
        failures.append(f"rerun manifest hashes differ: {first} vs {second}")

    ok = not failures
    criterion(9, ok, "maps nonnegative and shape-preserving (5 methods); CyCE stable bit-exact; classifier hash "
                     "fixed; rerun manifest hashes identical" if ok else "; ".join(failures))
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_ig_completeness(digit_classifier, digit_test_images, criterion):
    err = completeness_error(digit_classifier, digit_test_images[:32], steps=128)
    ok = err.mean() <= 0.02
    criterion(10, ok, f"mean relative completeness error {err.mean():.4f} (<= 0.02), max {err.max():.4f}, "
                      f"32 images, 128 steps")
    assert ok
