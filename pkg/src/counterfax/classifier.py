"""The binary classifier under explanation: LeNet with a sigmoid scalar head."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import rankdata

from counterfax.data import AugmentConfig, DatasetSplit, augment_batch
from counterfax.errors import ConfigError, ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


def state_hash(module: nn.Module) -> str:
    """sha256 over a module's parameters and buffers, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def as_batch(images, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Convert (H, W), (N, H, W) or (N, 1, H, W) input to an (N, 1, H, W) tensor."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if x.dim() == 2:
        x = x[None]
    if x.dim() == 3:
        x = x[:, None]
    if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != (height, width):
        raise ShapeError(f"expected images of size {height}x{width}, got shape {tuple(x.shape)}")
    return x.to(dtype)


class LeNet(nn.Module):
    def __init__(self, input_size: int = 28):
        super().__init__()
        self.input_size = input_size
        self.conv1 = nn.Conv2d(1, 6, 5)
        self.conv2 = nn.Conv2d(6, 16, 5)
        side = ((input_size - 4) // 2 - 4) // 2
        self.fc1 = nn.Linear(16 * side * side, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, 1)

    def logits(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.fc3(x).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


@dataclass
class ClassifierTrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-4
    lr_decay_factor: float = 3.0
    plateau_patience: int = 3
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError(f"invalid classifier training config {self}")


class Classifier:
    """A LeNet-style binary classifier plus its frozen flag.

    ``forward`` is the differentiable torch path used inside explainer losses;
    ``predict_prob`` and ``decide`` are the numpy-facing inference API.
    """

    def __init__(self, net: nn.Module, input_size: int):
        self.net = net
        self.input_size = input_size
        self.frozen = False
        self.history: list[dict] = []

    @property
    def architecture(self) -> dict:
        return {
            "kind": "lenet",
            "input_size": self.input_size,
            "layers": ["conv(6,5x5)", "maxpool2", "conv(16,5x5)", "maxpool2", "dense(120)", "dense(84)", "dense(1,sigmoid)"],
        }

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Probabilities for an (N, 1, H, W) tensor; gradients flow to ``x``."""
        return self.net(x.to(next(self.net.parameters()).dtype))

    __call__ = forward

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid scores, shape (N,); used for losses that must not saturate."""
        return self.net.logits(x.to(next(self.net.parameters()).dtype))

    def freeze(self) -> "Classifier":
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def param_hash(self) -> str:
        return state_hash(self.net)

    @torch.no_grad()
    def predict_prob(self, images, batch_size: int = 1024) -> np.ndarray:
        x = as_batch(images, self.input_size, self.input_size)
        was_training = self.net.training
        self.net.eval()
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        self.net.train(was_training)
        if not out:
            return np.zeros(0, np.float32)
        return torch.cat(out).float().numpy()

    def decide(self, images, threshold: float = 0.5) -> np.ndarray:
        """1 where the probability reaches ``threshold`` (ties go to class 1)."""
        return decide_from_prob(self.predict_prob(images), threshold)

    def save(self, path, manifest: dict | None = None) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {k: v.cpu().numpy() for k, v in self.net.state_dict().items()}
        arrays["__architecture__"] = np.array(json.dumps(self.architecture))
        np.savez(path, **arrays)
        digest = self.param_hash()
        if manifest is not None:
            manifest = dict(manifest, architecture=self.architecture, param_sha256=digest)
            path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return digest

    @classmethod
    def load(cls, path) -> "Classifier":
        with np.load(path) as z:
            arch = json.loads(str(z["__architecture__"]))
            state = {k: torch.from_numpy(z[k]) for k in z.files if k != "__architecture__"}
        model = build_lenet(arch["input_size"])
        model.net.load_state_dict(state)
        return model.freeze()


def decide_from_prob(prob, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold {threshold} outside (0, 1)")
    return (np.asarray(prob) >= threshold).astype(np.int64)


def build_lenet(input_size: int = 28, seed: int = 0) -> Classifier:
    if input_size < 16:
        raise ConfigError(f"LeNet needs input_size >= 16, got {input_size}")
    torch.manual_seed(seed)
    return Classifier(LeNet(input_size), input_size)


def bce_prob(target: torch.Tensor, prob: torch.Tensor) -> torch.Tensor:
    prob = prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * torch.log(prob) + (1.0 - target) * torch.log(1.0 - prob)).mean()


def _epoch_loss(model: Classifier, images: np.ndarray, labels: np.ndarray) -> float:
    prob = torch.from_numpy(model.predict_prob(images)).double()
    return float(bce_prob(torch.from_numpy(labels).double(), prob))


def train_classifier(model: Classifier, split: DatasetSplit, config: ClassifierTrainConfig) -> Classifier:
    """Train with BCE and Adam; lr is divided by ``lr_decay_factor`` on validation plateaus.

    Returns the same model, frozen. Per-epoch losses land in ``model.history``.
    """
    if model.frozen:
        raise ConfigError("model is frozen")
    train = split.train
    if len(train) == 0:
        raise ConfigError("empty training set")

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    net = model.net
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=1.0 / config.lr_decay_factor, patience=config.plateau_patience,
        threshold=1e-4, threshold_mode="abs")
    x_all = torch.from_numpy(train.images)
    y_all = torch.from_numpy(train.labels).float()
    monitor = split.val if len(split.val) else train

    for epoch in range(config.epochs):
        net.train()
        order = torch.randperm(len(train), generator=gen)
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x = augment_batch(x_all[idx], config.augment, gen)[:, None]
            loss = bce_prob(y_all[idx], net(x))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        val_loss = _epoch_loss(model, monitor.images, monitor.labels)
        sched.step(val_loss)
        model.history.append({"epoch": epoch, "train_loss": total / count, "val_loss": val_loss,
                              "lr": opt.param_groups[0]["lr"]})
        logger.info("classifier epoch %d train %.4f val %.4f", epoch, total / count, val_loss)
    return model.freeze()


def roc_auc(labels, scores) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties averaged)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n1 = int((labels == 1).sum())
    n0 = int((labels == 0).sum())
    if n0 == 0 or n1 == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0) / (n0 * n1))


def evaluate_classifier(model: Classifier, images, labels, threshold: float = 0.5) -> dict:
    prob = model.predict_prob(images)
    labels = np.asarray(labels)
    return {
        "auc": roc_auc(labels, prob),
        "accuracy": float((decide_from_prob(prob, threshold) == labels).mean()),
    }
