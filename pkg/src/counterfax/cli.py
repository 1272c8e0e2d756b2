"""Command-line workflow: prepare-data, train-classifier, train-explainer, explain, evaluate, report.

Artifacts live under ``output_dir/{data,classifier,explainers/<method>,eval}/``.
Each stage reads only the on-disk outputs of earlier stages and writes one
``manifest.json`` when it completes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from counterfax import __version__
from counterfax.classifier import Classifier, build_lenet, evaluate_classifier, train_classifier
from counterfax.config import RunConfig, load_config
from counterfax.data import (
    DIGITS_RELABEL,
    DatasetSplit,
    LabeledImages,
    MaskedImages,
    hash_arrays,
    load_idx_digits,
    load_image_folder,
    make_patch_dataset,
    partition_by_decision,
    save_arrays,
    split_dataset,
)
from counterfax.errors import (
    ConfigError,
    CounterfaxError,
    FormatError,
    NumericalError,
)
from counterfax.evaluation import (
    EmbeddingModel,
    MetricReport,
    adversarial_accuracy,
    domain_translation_report,
    gradient_map,
    integrated_gradients_map,
    localization_scores,
    mask_matched_percentile,
    stable_accuracy,
    train_embedding,
    write_scatter_csv,
)
from counterfax.explainers import Explainer, build_explainer, fit

logger = logging.getLogger("counterfax")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3
REPORT_COLUMNS = ("acc_a", "acc_s", "fd_0to1_adv", "fd_0to1_adv_source", "fd_0to1_stable",
                  "fd_1to0_adv", "fd_1to0_adv_source", "fd_1to0_stable",
                  "js_0to1_adv", "js_0to1_stable", "js_1to0_adv", "js_1to0_stable")
SPLITS = ("train", "val", "test")


# ----------------------------------------------------------------------------
# Manifests and layout


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def manifest_digest(manifest: dict) -> str:
    """Hash of a manifest without its volatile fields (timestamps, tool version)."""
    stable = {k: v for k, v in manifest.items() if k not in ("timestamps", "tool_version", "manifest_sha256")}
    return hashlib.sha256(json.dumps(stable, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(directory: Path, cfg: RunConfig, stage: str, artifacts: dict, metrics: dict | None = None,
                   started: float | None = None, **extra) -> dict:
    manifest = {
        "stage": stage,
        "config": cfg.snapshot(),
        "config_hash": extra.pop("config_hash", None),
        "artifacts": artifacts,
        "metrics": metrics or {},
        "tool_version": __version__,
        "timestamps": {"started": started, "finished": time.time()},
        **extra,
    }
    manifest["manifest_sha256"] = manifest_digest(manifest)
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return manifest


def read_manifest(directory: Path, what: str) -> dict:
    path = directory / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"{what} not found: missing {path} (run the earlier stage first)")
    return json.loads(path.read_text())


def data_dir(cfg: RunConfig) -> Path:
    return cfg.output_dir / "data"


def classifier_path(cfg: RunConfig) -> Path:
    return cfg.output_dir / "classifier" / "classifier.npz"


def explainer_dir(cfg: RunConfig, method: str | None = None) -> Path:
    return cfg.output_dir / "explainers" / (method or cfg.explainer.method.value)


def eval_dir(cfg: RunConfig) -> Path:
    return cfg.output_dir / "eval"


def load_split(cfg: RunConfig, name: str) -> LabeledImages:
    path = data_dir(cfg) / f"{name}.npz"
    if not path.is_file():
        raise ConfigError(f"prepared data not found: {path} (run prepare-data)")
    with np.load(path) as z:
        if "masks" in z.files:
            return MaskedImages(z["images"], z["labels"], z["ids"], z["masks"])
        return LabeledImages(z["images"], z["labels"], z["ids"])


def load_classifier(cfg: RunConfig) -> Classifier:
    path = classifier_path(cfg)
    if not path.is_file():
        raise ConfigError(f"classifier checkpoint not found: {path} (run train-classifier)")
    return Classifier.load(path)


def load_explainer(cfg: RunConfig, classifier: Classifier) -> Explainer:
    path = explainer_dir(cfg) / "explainer.npz"
    if not path.is_file():
        raise ConfigError(f"explainer checkpoint not found: {path} (run train-explainer --method "
                          f"{cfg.explainer.method.value})")
    return Explainer.load(path, classifier)


# ----------------------------------------------------------------------------
# Stages


def _materialize(cfg: RunConfig) -> DatasetSplit:
    ds = cfg.dataset
    seed = cfg.seed_for("data")
    if ds.source == "mnist":
        for key, p in ds.paths.items():
            if not cfg.resolve(p).is_file():
                raise ConfigError(f"dataset.paths.{key}: {cfg.resolve(p)} does not exist")
        relabel = {d: DIGITS_RELABEL.get(d, i) for i, d in enumerate(ds.keep_digits)}
        train = load_idx_digits(cfg.resolve(ds.paths["train_images"]), cfg.resolve(ds.paths["train_labels"]),
                                ds.keep_digits, relabel)
        test = load_idx_digits(cfg.resolve(ds.paths["test_images"]), cfg.resolve(ds.paths["test_labels"]),
                               ds.keep_digits, relabel, limit=ds.test_limit)
        split = split_dataset(train, ds.split, seed)
        if len(split.test) == 0:
            split.test = test
        return split
    if ds.source == "patches":
        syn = dict(ds.synthetic)
        samples = make_patch_dataset(syn.pop("n_per_class", 1000), seed=seed, **syn)
        return split_dataset(samples, ds.split, seed)
    samples = load_image_folder(cfg.resolve(ds.paths["root"]), ds.image_size, ds.class_names)
    return split_dataset(samples, ds.split, seed)


def cmd_prepare_data(cfg: RunConfig, args) -> dict:
    out = data_dir(cfg)
    config_hash = cfg.section_hash("dataset")
    existing = out / "manifest.json"
    if existing.is_file():
        prev = json.loads(existing.read_text())
        files_ok = all((out / f"{s}.npz").is_file() for s in SPLITS)
        if prev.get("config_hash") == config_hash and files_ok:
            logger.info("prepare-data: up to date (%s)", out)
            return prev
    started = time.time()
    split = _materialize(cfg)
    artifacts, counts = {}, {}
    for name in SPLITS:
        part: LabeledImages = getattr(split, name)
        arrays = {"images": part.images, "labels": part.labels, "ids": part.ids}
        if isinstance(part, MaskedImages):
            arrays["masks"] = part.masks
        artifacts[name] = save_arrays(out / f"{name}.npz", **arrays)
        counts[name] = len(part)
    logger.info("prepare-data: counts %s", counts)
    return write_manifest(out, cfg, "prepare-data", artifacts, {"counts": counts}, started, config_hash=config_hash)


def cmd_train_classifier(cfg: RunConfig, args) -> dict:
    read_manifest(data_dir(cfg), "prepared data")
    started = time.time()
    split = DatasetSplit(*(load_split(cfg, s) for s in SPLITS))
    if len(split.train) == 0:
        raise ConfigError("prepared training split is empty")
    model = build_lenet(split.train.images.shape[-1], seed=cfg.seed_for("classifier"))
    train_classifier(model, split, cfg.classifier.train)
    evaluation = split.test if len(split.test) else split.val
    metrics = evaluate_classifier(model, evaluation.images, evaluation.labels, cfg.classifier.threshold)
    digest = model.save(classifier_path(cfg))
    out = classifier_path(cfg).parent
    atomic_write_text(out / "history.json", json.dumps(model.history, indent=2))
    logger.info("train-classifier: auc %.5f accuracy %.4f", metrics["auc"], metrics["accuracy"])
    return write_manifest(out, cfg, "train-classifier", {"classifier": digest}, metrics, started,
                          config_hash=cfg.section_hash("dataset", "classifier"),
                          architecture=model.architecture)


def cmd_train_explainer(cfg: RunConfig, args) -> dict:
    classifier = load_classifier(cfg)
    started = time.time()
    ex_cfg = cfg.explainer
    threshold = cfg.classifier.threshold
    train = partition_by_decision(load_split(cfg, "train").images, classifier, threshold)
    val = partition_by_decision(load_split(cfg, "val").images, classifier, threshold)
    explainer = build_explainer(ex_cfg.method, ex_cfg.generator, ex_cfg.discriminator, classifier,
                                ex_cfg.weights, threshold, seed=cfg.seed_for("explainer"))
    out = explainer_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "steps.jsonl", "w") as log:
        def on_step(step, record):
            log.write(json.dumps({"step": step, **record}, sort_keys=True) + "\n")

        history = fit(explainer, train.limited(ex_cfg.images_per_domain), ex_cfg.schedule,
                      val if not val.one_sided else None, on_step=on_step)
    digest = explainer.save(out / "explainer.npz")
    atomic_write_text(out / "history.json", json.dumps(history, indent=2))
    final = history[-1]["val"] if history else {}
    return write_manifest(out, cfg, "train-explainer", {"explainer": digest, "classifier": explainer.classifier_hash},
                          final, started, config_hash=cfg.section_hash("dataset", "classifier", "explainer"),
                          method=ex_cfg.method.value)


def _read_images(path: Path, size: int) -> np.ndarray:
    if not path.exists():
        raise ConfigError(f"input {path} does not exist")
    if path.is_dir() or path.suffix.lower() in (".png", ".pgm"):
        from PIL import Image

        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".pgm")) if path.is_dir() else [path]
        if not files:
            raise ConfigError(f"no .png/.pgm images in {path}")
        imgs = []
        for f in files:
            with Image.open(f) as im:
                im = im.convert("L")
                if im.size != (size, size):
                    im = im.resize((size, size), Image.BILINEAR)
                imgs.append(np.asarray(im, dtype=np.float32) / 255.0)
        return np.stack(imgs)
    if path.suffix == ".npz":
        with np.load(path) as z:
            if "images" not in z.files:
                raise FormatError(f"{path} has no 'images' array")
            images = z["images"]
    elif path.suffix == ".npy":
        images = np.load(path)
    else:
        raise ConfigError(f"unsupported input type {path.suffix!r}; use .npz, .npy, .png or a directory")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3:
        raise FormatError(f"expected (N, H, W) images in {path}, got {images.shape}")
    return images


def to_uint8(a: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 (a constant array maps to 0)."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, np.uint8)
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_sheet(path: Path, columns: dict, pad: int = 2) -> None:
    """Grid image: one row per input, one column per entry of ``columns``."""
    from PIL import Image

    names = list(columns)
    n, h, w = columns[names[0]].shape
    sheet = np.full((n * (h + pad) + pad, len(names) * (w + pad) + pad), 255, np.uint8)
    for r in range(n):
        for c, name in enumerate(names):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            sheet[y:y + h, x:x + w] = to_uint8(columns[name][r])
    Image.fromarray(sheet).save(path)


def cmd_explain(cfg: RunConfig, args) -> dict:
    from PIL import Image

    classifier = load_classifier(cfg)
    explainer = load_explainer(cfg, classifier)
    if not args.input:
        raise ConfigError("explain needs --input")
    images = _read_images(Path(args.input), classifier.input_size)
    out = Path(args.out) if args.out else explainer_dir(cfg) / "explanations"
    out.mkdir(parents=True, exist_ok=True)
    result = explainer.explain(images)
    arrays = {}
    for i in range(len(images)):
        for kind in ("stable", "adversary", "map"):
            stem = f"{i:04d}_{kind}"
            Image.fromarray(to_uint8(result[kind][i])).save(out / f"{stem}.png")
            np.save(out / f"{stem}.npy", result[kind][i])
            arrays[stem] = result[kind][i]
    digest = hash_arrays(arrays)
    write_sheet(out / "sheet.png", {"input": images, "stable": result["stable"],
                                    "adversary": result["adversary"], "map": result["map"]})
    logger.info("explain: %d images -> %s", len(images), out)
    return write_manifest(out, cfg, "explain", {"explanations": digest, "explainer": explainer.param_hash()},
                          {"n_images": len(images)}, method=explainer.method.value)


def _embedding(cfg: RunConfig, classifier: Classifier) -> EmbeddingModel:
    """Train the evaluation embedding once per (classifier, VAE config); reuse it afterwards."""
    path = eval_dir(cfg) / "embedding" / "embedding.npz"
    key = hashlib.sha256(json.dumps([classifier.param_hash(), cfg.evaluation.vae.to_dict()],
                                    sort_keys=True).encode()).hexdigest()
    if path.is_file():
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("key") == key:
            return EmbeddingModel.load(path)
    real = partition_by_decision(load_split(cfg, "train").images, classifier, cfg.classifier.threshold)
    model = train_embedding(real, cfg.evaluation.vae)
    model.save(path, {"key": key})
    return model


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    classifier = load_classifier(cfg)
    explainer = load_explainer(cfg, classifier)
    started = time.time()
    ev = cfg.evaluation
    test = load_split(cfg, "test")
    if len(test) == 0:
        test = load_split(cfg, "val")
    images = test.images
    acc = {"a": adversarial_accuracy(classifier, explainer, images),
           "s": stable_accuracy(classifier, explainer, images)}
    report = MetricReport(explainer.method.value, cfg.dataset.source, classifier.param_hash(), acc)
    artifacts = {"classifier": classifier.param_hash(), "explainer": explainer.param_hash()}
    out = eval_dir(cfg) / explainer.method.value
    out.mkdir(parents=True, exist_ok=True)

    if ev.domain_translation:
        embedding = _embedding(cfg, classifier)
        artifacts["embedding"] = embedding.param_hash()
        real = partition_by_decision(images, classifier, cfg.classifier.threshold)
        dt = domain_translation_report(classifier, explainer, embedding, real, ev.grid, ev.max_points)
        report.fd, report.js = dt["fd"], dt["js"]
        report.extra["embedding_head_val_accuracy"] = embedding.head_val_accuracy
        write_scatter_csv(dt["scatter"], out / "scatter.csv")

    if isinstance(test, MaskedImages):
        has_mask = test.masks.reshape(len(test), -1).any(1)
        masks = test.masks[has_mask]
        sel = images[has_mask]
        percentiles = list(ev.percentiles)
        if len(masks):
            matched = float(np.mean([mask_matched_percentile(m) for m in masks]))
            percentiles.append(round(matched, 6))
        maps = {"explainer": explainer.explanation_map(sel),
                "gradient": gradient_map(classifier, sel),
                "ig": integrated_gradients_map(classifier, sel, steps=ev.ig_steps),
                "random": np.random.default_rng(cfg.seed_for("eval")).random(sel.shape)}
        scores = {k: localization_scores(v, masks, percentiles) for k, v in maps.items()}
        report.loc = {"iou": scores["explainer"]["iou"], "ncc": scores["explainer"]["ncc"],
                      "matched_percentile": percentiles[-1]}
        report.extra["baselines"] = {k: {"iou": {f"{p:g}": v for p, v in s["iou"].items()}, "ncc": s["ncc"]}
                                     for k, s in scores.items() if k != "explainer"}

    text = report.to_json()
    atomic_write_text(out / "report.json", text)
    artifacts["report"] = hashlib.sha256(text.encode()).hexdigest()
    logger.info("evaluate: %s", json.dumps(report.flat(), default=str))
    return write_manifest(out, cfg, "evaluate", artifacts, report.flat(), started, method=explainer.method.value)


def _report_path(cfg: RunConfig, run: str) -> Path:
    p = Path(run)
    if p.suffix == ".json":
        return p
    if p.is_dir():
        return p / "report.json"
    return eval_dir(cfg) / run / "report.json"


def cmd_report(cfg: RunConfig, args) -> dict:
    runs = [r.strip() for r in (args.runs or "").split(",") if r.strip()]
    if not runs:
        runs = sorted(p.name for p in eval_dir(cfg).iterdir() if (p / "report.json").is_file()) \
            if eval_dir(cfg).is_dir() else []
    if not runs:
        raise ConfigError("no runs to report (pass --runs or run evaluate first)")
    rows = []
    for run in runs:
        path = _report_path(cfg, run)
        if not path.is_file():
            raise ConfigError(f"run {run!r} not found: {path}")
        report = MetricReport.from_dict(json.loads(path.read_text()))
        rows.append((report.method, report.flat()))
    extra = sorted({k for _, r in rows for k in r} - set(REPORT_COLUMNS))
    columns = [c for c in REPORT_COLUMNS if any(c in r for _, r in rows)] + extra

    def cell(v):
        return "-" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)

    table = [["method"] + columns] + [[m] + [cell(r.get(c)) for c in columns] for m, r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(columns) + 1)]
    text = "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in table) + "\n"
    out = Path(args.out) if args.out else eval_dir(cfg) / "report"
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "table.txt", text)
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + columns)
        for m, r in rows:
            w.writerow([m] + ["" if r.get(c) is None else repr(r.get(c)) for c in columns])
    print(text, end="")
    return {"rows": len(rows), "columns": columns}


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-classifier": cmd_train_classifier,
    "train-explainer": cmd_train_explainer,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="counterfax", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("--method", help="explainer method (SyCE, CyCE, CyCE_noFc, SSyE, CyCSAE)")
        p.add_argument("--input", help="images to explain (.npz/.npy/.png or a directory)")
        p.add_argument("--out", help="output directory for explain/report")
        p.add_argument("--runs", help="comma-separated run ids or report paths")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, seed=args.seed, method=args.method)
        COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        print(f"counterfax: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CounterfaxError, FileNotFoundError) as exc:
        print(f"counterfax: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
