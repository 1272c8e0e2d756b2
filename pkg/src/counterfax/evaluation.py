"""Quantitative evaluation of explainers.

Decision accuracies on generated images, domain-translation distances in a
VAE embedding (Frechet distance on mean codes, Jensen-Shannon distance on 2-D
PCA densities), localization scores against ground-truth masks, and the
gradient / integrated-gradients baseline maps.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial.distance import jensenshannon
from scipy.stats import gaussian_kde

from counterfax.classifier import Classifier, as_batch, decide_from_prob, state_hash
from counterfax.data import DecisionPartition
from counterfax.errors import (
    ConfigError,
    DegenerateMetricWarning,
    NumericalError,
    SampleSizeError,
    ShapeError,
    UndefinedMetricError,
)

logger = logging.getLogger(__name__)

EIG_CLAMP = 1e-8


# ----------------------------------------------------------------------------
# Decision accuracies


def _decisions(classifier: Classifier, images, threshold: float) -> np.ndarray:
    return decide_from_prob(classifier.predict_prob(images), threshold)


def adversarial_accuracy(classifier: Classifier, explainer, images, threshold: float | None = None) -> float:
    """Fraction of images whose adversary keeps the original decision (lower is better)."""
    images = np.asarray(images)
    if len(images) == 0:
        raise UndefinedMetricError("accuracy of an empty image set is undefined")
    threshold = explainer.threshold if threshold is None else threshold
    dec = _decisions(classifier, images, threshold)
    return float((_decisions(classifier, explainer.adversary(images), threshold) == dec).mean())


def stable_accuracy(classifier: Classifier, explainer, images, threshold: float | None = None) -> float:
    """Fraction of images whose stable generation keeps the original decision (higher is better)."""
    images = np.asarray(images)
    if len(images) == 0:
        raise UndefinedMetricError("accuracy of an empty image set is undefined")
    threshold = explainer.threshold if threshold is None else threshold
    dec = _decisions(classifier, images, threshold)
    return float((_decisions(classifier, explainer.stable(images), threshold) == dec).mean())


# ----------------------------------------------------------------------------
# VAE embedding


@dataclass
class VAEConfig:
    latent_dim: int = 16
    base_channels: int = 32
    head_hidden: int = 32
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    kl_weight: float = 1.0
    head_weight: float = 1.0
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"invalid VAE config {self}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction {self.val_fraction} outside [0, 1)")
        if self.kl_weight < 0 or self.head_weight < 0:
            raise ConfigError("VAE loss weights must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class VAE(nn.Module):
    """Two stride-2 conv blocks to a dense mean/log-variance, mirrored decoder, MLP head on the mean."""

    def __init__(self, input_size: int, config: VAEConfig):
        super().__init__()
        if input_size % 4:
            raise ConfigError(f"VAE input_size {input_size} must be divisible by 4")
        c = config.base_channels
        self.side = input_size // 4
        flat = 2 * c * self.side * self.side
        self.encoder = nn.Sequential(
            nn.Conv2d(1, c, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
        )
        self.mu = nn.Linear(flat, config.latent_dim)
        self.logvar = nn.Linear(flat, config.latent_dim)
        self.decoder_in = nn.Linear(config.latent_dim, flat)
        self.decoder = nn.Sequential(
            nn.ReLU(),
            nn.Unflatten(1, (2 * c, self.side, self.side)),
            nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(c, 1, 4, stride=2, padding=1),
        )
        self.head = nn.Sequential(
            nn.Linear(config.latent_dim, config.head_hidden), nn.ReLU(),
            nn.Linear(config.head_hidden, 1),
        )

    def encode(self, x):
        h = self.encoder(x)
        return self.mu(h), self.logvar(h)

    def decode_logits(self, z):
        return self.decoder(self.decoder_in(z))

    def head_prob(self, mu):
        return torch.sigmoid(self.head(mu)).squeeze(1)


class EmbeddingModel:
    """A trained, frozen VAE whose mean code ``mu`` is the evaluation embedding."""

    def __init__(self, vae: VAE, input_size: int, config: VAEConfig):
        self.vae = vae
        self.input_size = input_size
        self.config = config
        self.latent_dim = config.latent_dim
        self.history: list[dict] = []
        self.head_val_accuracy: float | None = None

    def freeze(self) -> "EmbeddingModel":
        self.vae.eval()
        for p in self.vae.parameters():
            p.requires_grad_(False)
        return self

    def param_hash(self) -> str:
        return state_hash(self.vae)

    @torch.no_grad()
    def head_prob(self, images) -> np.ndarray:
        mu = torch.from_numpy(embed_mu(self, images).astype(np.float32))
        return self.vae.head_prob(mu).numpy()

    def save(self, path, manifest: dict | None = None) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, **{k: v.numpy() for k, v in self.vae.state_dict().items()})
        digest = self.param_hash()
        meta = dict(manifest or {}, input_size=self.input_size, config=self.config.to_dict(),
                    head_val_accuracy=self.head_val_accuracy, history=self.history, param_sha256=digest)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return digest

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        config = VAEConfig(**meta["config"])
        model = cls(VAE(meta["input_size"], config), meta["input_size"], config)
        with np.load(path) as z:
            model.vae.load_state_dict({k: torch.from_numpy(z[k]) for k in z.files})
        model.head_val_accuracy = meta.get("head_val_accuracy")
        model.history = meta.get("history", [])
        return model.freeze()


def _vae_losses(vae: VAE, x, y, config: VAEConfig, noise):
    mu, logvar = vae.encode(x)
    z = mu + torch.exp(0.5 * logvar) * noise
    recon = F.binary_cross_entropy_with_logits(vae.decode_logits(z), x, reduction="none").flatten(1).sum(1).mean()
    kl = (-0.5 * (1 + logvar - mu.pow(2) - logvar.exp()).sum(1)).mean()
    head = F.binary_cross_entropy_with_logits(vae.head(mu).squeeze(1), y)
    return recon, kl, head


def train_embedding(real_partition: DecisionPartition, config: VAEConfig | None = None) -> EmbeddingModel:
    """Fit the VAE and its chi0/chi1 head on real images of both partition sides."""
    config = config or VAEConfig()
    if real_partition.one_sided:
        raise ConfigError("embedding training needs real images from both domains")
    images = np.concatenate([real_partition.chi0, real_partition.chi1]).astype(np.float32)
    labels = np.concatenate([np.zeros(len(real_partition.chi0)), np.ones(len(real_partition.chi1))]).astype(np.float32)
    size = images.shape[-1]

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(images))
    n_val = int(len(images) * config.val_fraction)
    val_idx, train_idx = order[:n_val], order[n_val:]

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    vae = VAE(size, config)
    model = EmbeddingModel(vae, size, config)
    opt = torch.optim.Adam(vae.parameters(), lr=config.learning_rate)
    x_all = torch.from_numpy(images)[:, None]
    y_all = torch.from_numpy(labels)
    x_train = x_all[train_idx]
    y_train = y_all[train_idx]

    def evaluate_recon(x, y):
        with torch.no_grad():
            vae.eval()
            r, k, h = _vae_losses(vae, x, y, config, torch.zeros(len(x), config.latent_dim))
            vae.train()
        return float(r), float(k), float(h)

    r0, _, _ = evaluate_recon(x_train[:1024], y_train[:1024])
    model.history.append({"epoch": -1, "recon": r0})
    for epoch in range(config.epochs):
        vae.train()
        perm = torch.randperm(len(x_train), generator=gen)
        sums, count = np.zeros(3), 0
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            noise = torch.randn(len(idx), config.latent_dim, generator=gen)
            recon, kl, head = _vae_losses(vae, x_train[idx], y_train[idx], config, noise)
            loss = recon + config.kl_weight * kl + config.head_weight * head
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += [float(recon.detach()), float(kl.detach()), float(head.detach())]
            count += 1
        rec = dict(zip(("recon", "kl", "head"), (sums / count).tolist()), epoch=epoch)
        model.history.append(rec)
        logger.info("vae epoch %d recon %.2f kl %.2f head %.4f", epoch, rec["recon"], rec["kl"], rec["head"])

    model.freeze()
    if n_val:
        prob = model.head_prob(images[val_idx])
        model.head_val_accuracy = float(((prob >= 0.5).astype(np.float32) == labels[val_idx]).mean())
    return model


@torch.no_grad()
def embed_mu(model: EmbeddingModel, images, batch_size: int = 512) -> np.ndarray:
    """Mean codes (N, latent_dim) in float64; deterministic (no sampling)."""
    x = as_batch(images, model.input_size, model.input_size)
    model.vae.eval()
    out = [model.vae.encode(x[s:s + batch_size])[0] for s in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, model.latent_dim))
    return torch.cat(out).double().numpy()


# ----------------------------------------------------------------------------
# Distribution distances


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    if w.min() < -EIG_CLAMP * max(1.0, abs(w).max()):
        raise NumericalError(f"matrix square root of a non-PSD matrix (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_set_a, mu_set_b) -> float:
    """Frechet distance between Gaussian fits of two vector sets.

    The cross term trace((Ca Cb)^(1/2)) is computed as trace((Sa Cb Sa)^(1/2))
    with Sa = Ca^(1/2), which is symmetric PSD and has the same eigenvalues.
    """
    a = np.asarray(mu_set_a, dtype=np.float64)
    b = np.asarray(mu_set_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"incompatible vector sets {a.shape} and {b.shape}")
    d = a.shape[1]
    for name, s in (("a", a), ("b", b)):
        if len(s) < d + 1:
            raise SampleSizeError(f"set {name} has {len(s)} vectors; need >= {d + 1} for a {d}-dim covariance")
    ma, mb = a.mean(0), b.mean(0)
    ca, cb = np.cov(a, rowvar=False).reshape(d, d), np.cov(b, rowvar=False).reshape(d, d)
    sa = _sqrtm_psd(ca)
    cross = np.trace(_sqrtm_psd(sa @ cb @ sa))
    fd = float(((ma - mb) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2.0 * cross)
    if not np.isfinite(fd):
        raise NumericalError("non-finite Frechet distance")
    return max(fd, 0.0)


@dataclass
class PCAFrame:
    mean: np.ndarray
    components: np.ndarray  # (2, D)
    explained_variance: np.ndarray

    def project(self, vectors) -> np.ndarray:
        return (np.asarray(vectors, dtype=np.float64) - self.mean) @ self.components.T


def fit_pca_2d(reference_vectors, rank_tol: float = 1e-10) -> PCAFrame:
    ref = np.asarray(reference_vectors, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[1] < 2 or len(ref) < 3:
        raise ShapeError(f"need at least 3 reference vectors of dim >= 2, got {ref.shape}")
    mean = ref.mean(0)
    _, s, vt = np.linalg.svd(ref - mean, full_matrices=False)
    if s[0] == 0 or s[1] <= rank_tol * s[0]:
        raise NumericalError("reference vectors span fewer than 2 dimensions")
    return PCAFrame(mean, vt[:2], s[:2] ** 2 / (len(ref) - 1))


def pca_project_2d(reference_vectors, query_vectors) -> np.ndarray:
    """Project queries onto the first two principal axes of the (centered) reference set."""
    return fit_pca_2d(reference_vectors).project(query_vectors)


@dataclass
class GridConfig:
    size: int = 200
    padding_bandwidths: float = 3.0

    def to_dict(self) -> dict:
        return asdict(self)


def js_distance(points_a, points_b, bandwidth_rule: str = "scott", grid_config: GridConfig | None = None) -> float:
    """Square root of the base-2 Jensen-Shannon divergence between 2-D KDEs on a shared grid."""
    grid_config = grid_config or GridConfig()
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != 2 or b.shape[1] != 2:
        raise ShapeError(f"expected (N, 2) point sets, got {a.shape} and {b.shape}")
    if len(a) < 3 or len(b) < 3:
        raise SampleSizeError(f"need >= 3 points per set, got {len(a)} and {len(b)}")
    try:
        kde_a = gaussian_kde(a.T, bw_method=bandwidth_rule)
        kde_b = gaussian_kde(b.T, bw_method=bandwidth_rule)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular point cloud for KDE: {exc}") from exc
    bw = np.maximum(np.sqrt(np.diag(kde_a.covariance)), np.sqrt(np.diag(kde_b.covariance)))
    both = np.concatenate([a, b])
    lo = both.min(0) - grid_config.padding_bandwidths * bw
    hi = both.max(0) + grid_config.padding_bandwidths * bw
    gx = np.linspace(lo[0], hi[0], grid_config.size)
    gy = np.linspace(lo[1], hi[1], grid_config.size)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    grid = np.vstack([xx.ravel(), yy.ravel()])
    pa, pb = kde_a(grid), kde_b(grid)
    if pa.sum() <= 0 or pb.sum() <= 0:
        raise NumericalError("KDE mass vanished on the evaluation grid")
    d = jensenshannon(pa / pa.sum(), pb / pb.sum(), base=2)
    return float(np.clip(d, 0.0, 1.0))


def domain_translation_report(classifier: Classifier, explainer, embedding: EmbeddingModel,
                              real_partition: DecisionPartition, grid_config: GridConfig | None = None,
                              max_points: int | None = None) -> dict:
    """FD and JS between embedded generations and embedded real images, per direction and kind.

    Returns ``{"fd": ..., "js": ..., "scatter": rows}`` where ``fd["0to1"]`` holds
    ``adv`` (adversaries vs real target domain), ``adv_source`` (adversaries vs
    real source domain) and, when the method has one, ``stable`` (stable
    generations vs real source domain).
    """
    if real_partition.one_sided:
        raise ConfigError("domain translation needs real images from both domains")
    real = {i: real_partition.side(i)[:max_points] for i in (0, 1)}
    mu_real = {i: embed_mu(embedding, real[i]) for i in (0, 1)}
    frame = fit_pca_2d(np.concatenate([mu_real[0], mu_real[1]]))
    pts_real = {i: frame.project(mu_real[i]) for i in (0, 1)}
    scatter = [(x, y, f"real{i}") for i in (0, 1) for x, y in pts_real[i]]

    fd, js = {}, {}
    for i in (0, 1):
        key = f"{i}to{1 - i}"
        gen = {"adv": explainer.adversary(real[i])}
        if explainer.has_stable:
            gen["stable"] = explainer.stable(real[i])
        fd[key], js[key] = {}, {}
        for kind, images in gen.items():
            mu = embed_mu(embedding, images)
            pts = frame.project(mu)
            scatter += [(x, y, f"{kind}{key}") for x, y in pts]
            if kind == "adv":
                fd[key]["adv"] = frechet_distance(mu, mu_real[1 - i])
                fd[key]["adv_source"] = frechet_distance(mu, mu_real[i])
                js[key]["adv"] = js_distance(pts, pts_real[1 - i], grid_config=grid_config)
                js[key]["adv_source"] = js_distance(pts, pts_real[i], grid_config=grid_config)
            else:
                fd[key]["stable"] = frechet_distance(mu, mu_real[i])
                js[key]["stable"] = js_distance(pts, pts_real[i], grid_config=grid_config)
    return {"fd": fd, "js": js, "scatter": scatter}


def write_scatter_csv(rows: Sequence[tuple], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "group"])
        for x, y, g in rows:
            w.writerow([repr(float(x)), repr(float(y)), g])


# ----------------------------------------------------------------------------
# Localization


def percentile_threshold(values, percentile: float) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64), percentile))


def binarize_at_percentile(emap, percentile: float) -> np.ndarray:
    """Foreground where the map exceeds its own percentile value (ties excluded)."""
    if not 0.0 < percentile < 100.0:
        raise ConfigError(f"percentile {percentile} outside (0, 100)")
    emap = np.asarray(emap, dtype=np.float64)
    return emap > percentile_threshold(emap, percentile)


def iou_at_percentile(emap, gt_mask, percentile: float) -> float:
    emap = np.asarray(emap)
    gt = np.asarray(gt_mask).astype(bool)
    if emap.shape != gt.shape:
        raise ShapeError(f"map shape {emap.shape} != mask shape {gt.shape}")
    if not gt.any():
        raise UndefinedMetricError("IoU against an empty ground-truth mask is undefined")
    fg = binarize_at_percentile(emap, percentile)
    return float((fg & gt).sum() / (fg | gt).sum())


def ncc(emap, gt_mask) -> float:
    """Pearson correlation between a raw map and a mask; 0 (with a warning) when either is constant."""
    e = np.asarray(emap, dtype=np.float64).ravel()
    m = np.asarray(gt_mask, dtype=np.float64).ravel()
    if e.shape != m.shape:
        raise ShapeError(f"map size {e.size} != mask size {m.size}")
    e = e - e.mean()
    m = m - m.mean()
    se, sm = np.sqrt((e * e).mean()), np.sqrt((m * m).mean())
    if se == 0 or sm == 0:
        warnings.warn("NCC undefined for a constant map or mask; returning 0", DegenerateMetricWarning, stacklevel=2)
        return 0.0
    return float(np.clip((e * m).mean() / (se * sm), -1.0, 1.0))


def mask_matched_percentile(gt_mask) -> float:
    """Percentile whose foreground fraction equals the mask's pixel fraction."""
    gt = np.asarray(gt_mask).astype(bool)
    return 100.0 * (1.0 - gt.mean())


def localization_scores(maps, masks, percentiles: Sequence[float]) -> dict:
    """Mean IoU per percentile and mean NCC over images with a non-empty mask."""
    maps = np.asarray(maps)
    masks = np.asarray(masks).astype(bool)
    keep = masks.reshape(len(masks), -1).any(1)
    if not keep.any():
        raise UndefinedMetricError("no image has a non-empty ground-truth mask")
    maps, masks = maps[keep], masks[keep]
    iou = {float(p): float(np.mean([iou_at_percentile(e, m, p) for e, m in zip(maps, masks)]))
           for p in percentiles}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMetricWarning)
        score = float(np.mean([ncc(e, m) for e, m in zip(maps, masks)]))
    return {"iou": iou, "ncc": score, "n": int(keep.sum())}


# ----------------------------------------------------------------------------
# Attribution baselines


def _prob_fn(classifier, dtype=torch.float64) -> Callable[[torch.Tensor], torch.Tensor]:
    """Differentiable (N, 1, H, W) -> (N,) probability function in ``dtype``."""
    if isinstance(classifier, Classifier):
        net = copy.deepcopy(classifier.net).to(dtype).eval()
        return lambda x: net(x.to(dtype))
    return lambda x: classifier(x.to(dtype))


def _input_size(classifier, x) -> int:
    return classifier.input_size if isinstance(classifier, Classifier) else np.shape(x)[-1]


def _target_prob(f, x, target: int | None):
    p = f(x)
    return p if target in (None, 1) else 1.0 - p


def signed_gradient(classifier, x, target: int | None = None) -> np.ndarray:
    size = _input_size(classifier, x)
    f = _prob_fn(classifier)
    xb = as_batch(x, size, size, torch.float64).clone().requires_grad_(True)
    (g,) = torch.autograd.grad(_target_prob(f, xb, target).sum(), xb)
    out = g[:, 0].numpy()
    return out[0] if np.ndim(x) == 2 else out


def gradient_map(classifier, x, target: int | None = None) -> np.ndarray:
    """|d f(x) / d x| per pixel, with f the class-1 probability (or 1 - p for ``target=0``)."""
    return np.abs(signed_gradient(classifier, x, target))


def integrated_gradients(classifier, x, baseline=None, steps: int = 64, target: int | None = None) -> np.ndarray:
    """Signed integrated-gradients attributions with a midpoint Riemann sum.

    alpha_k = (k - 1/2) / steps for k = 1..steps, so ``steps=1`` is the
    gradient at the midpoint between baseline and input times (x - baseline).
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    size = _input_size(classifier, x)
    f = _prob_fn(classifier)
    xb = as_batch(x, size, size, torch.float64)
    base = torch.zeros_like(xb) if baseline is None else as_batch(baseline, size, size, torch.float64).expand_as(xb)
    total = torch.zeros_like(xb)
    for k in range(steps):
        alpha = (k + 0.5) / steps
        z = (base + alpha * (xb - base)).clone().requires_grad_(True)
        (g,) = torch.autograd.grad(_target_prob(f, z, target).sum(), z)
        total += g
    out = ((xb - base) * total / steps)[:, 0].numpy()
    return out[0] if np.ndim(x) == 2 else out


def integrated_gradients_map(classifier, x, baseline=None, steps: int = 64, target: int | None = None) -> np.ndarray:
    return np.abs(integrated_gradients(classifier, x, baseline, steps, target))


def completeness_error(classifier, x, baseline=None, steps: int = 128) -> np.ndarray:
    """Relative gap |sum(attr) - (f(x) - f(b))| / |f(x) - f(b)| per image."""
    size = _input_size(classifier, x)
    attr = integrated_gradients(classifier, x, baseline, steps)
    f = _prob_fn(classifier)
    xb = as_batch(x, size, size, torch.float64)
    base = torch.zeros_like(xb) if baseline is None else as_batch(baseline, size, size, torch.float64).expand_as(xb)
    with torch.no_grad():
        delta = (f(xb) - f(base)).numpy()
    sums = np.asarray(attr).reshape(len(delta), -1).sum(1)
    return np.abs(sums - delta) / np.maximum(np.abs(delta), 1e-12)


# ----------------------------------------------------------------------------
# Report


@dataclass
class MetricReport:
    method: str
    dataset: str
    classifier_hash: str
    acc: dict = field(default_factory=dict)
    fd: dict = field(default_factory=dict)
    js: dict = field(default_factory=dict)
    loc: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.acc.items():
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {k}={v} outside [0, 1]")
        for d in self.fd.values():
            for v in d.values():
                if v < 0:
                    raise ValueError(f"negative Frechet distance {v}")
        for d in self.js.values():
            for v in d.values():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"JS distance {v} outside [0, 1]")

    def to_dict(self) -> dict:
        loc = dict(self.loc)
        if "iou" in loc:
            loc["iou"] = {f"{float(p):g}": v for p, v in loc["iou"].items()}
        return {"method": self.method, "dataset": self.dataset, "classifier_hash": self.classifier_hash,
                "acc": self.acc, "fd": self.fd, "js": self.js, "loc": loc, "extra": self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{k: d.get(k, {}) for k in ("method", "dataset", "classifier_hash", "acc", "fd", "js",
                                                  "loc", "extra")})

    def flat(self) -> dict:
        """Single-level mapping used for comparison tables."""
        row = {f"acc_{k}": v for k, v in self.acc.items()}
        for name, section in (("fd", self.fd), ("js", self.js)):
            for direction, d in section.items():
                for kind, v in d.items():
                    row[f"{name}_{direction}_{kind}"] = v
        for p, v in self.loc.get("iou", {}).items():
            row[f"iou_{float(p):g}"] = v
        if "ncc" in self.loc:
            row["ncc"] = self.loc["ncc"]
        return row


__all__ = [
    "EmbeddingModel",
    "GridConfig",
    "MetricReport",
    "PCAFrame",
    "VAE",
    "VAEConfig",
    "adversarial_accuracy",
    "binarize_at_percentile",
    "completeness_error",
    "domain_translation_report",
    "embed_mu",
    "fit_pca_2d",
    "frechet_distance",
    "gradient_map",
    "integrated_gradients",
    "integrated_gradients_map",
    "iou_at_percentile",
    "js_distance",
    "localization_scores",
    "mask_matched_percentile",
    "ncc",
    "pca_project_2d",
    "stable_accuracy",
    "train_embedding",
    "write_scatter_csv",
]
