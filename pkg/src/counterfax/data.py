"""Dataset ingestion, decision partitioning, synthetic patch data and augmentation.

Images are handled as float32 arrays of shape (N, H, W) with values in [0, 1].
"""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from counterfax.errors import ConfigError, FormatError, ShapeError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# digit "3" is class 0 and digit "8" is class 1
DIGITS_RELABEL = {3: 0, 8: 1}


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray
    label: int


@dataclass
class LabeledImages:
    """A labeled image collection.

    ``ids`` carries sample identity (position in the source file or folder
    listing), which is what split disjointness is checked against.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.images.ndim != 3:
            raise ShapeError(f"expected (N, H, W) images, got shape {self.images.shape}")
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ShapeError("images, labels and ids must have the same length")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i], int(self.labels[i]))

    def subset(self, index) -> "LabeledImages":
        index = np.asarray(index, dtype=np.int64)
        return LabeledImages(self.images[index], self.labels[index], self.ids[index])

    @classmethod
    def empty(cls, height: int = 28, width: int = 28) -> "LabeledImages":
        return cls(np.zeros((0, height, width), np.float32), np.zeros(0, np.int64), np.zeros(0, np.int64))


@dataclass
class DatasetSplit:
    train: LabeledImages
    val: LabeledImages
    test: LabeledImages


@dataclass
class MaskedImages(LabeledImages):
    masks: np.ndarray = field(default=None)

    def __post_init__(self):
        super().__post_init__()
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.masks.shape != self.images.shape:
            raise ShapeError("masks must have the same shape as images")

    def subset(self, index) -> "MaskedImages":
        index = np.asarray(index, dtype=np.int64)
        return MaskedImages(self.images[index], self.labels[index], self.ids[index], self.masks[index])


@dataclass
class DecisionPartition:
    """Real images split by the frozen classifier's thresholded decision."""

    chi0: np.ndarray
    chi1: np.ndarray
    classifier_id: str
    threshold: float
    # positions of chi0/chi1 members in the source array
    index0: np.ndarray = field(default=None)
    index1: np.ndarray = field(default=None)

    @property
    def one_sided(self) -> bool:
        return len(self.chi0) == 0 or len(self.chi1) == 0

    def side(self, i: int) -> np.ndarray:
        return self.chi0 if i == 0 else self.chi1

    def limited(self, n: int | None) -> "DecisionPartition":
        """First ``n`` members of each side (the whole partition when ``n`` is None)."""
        if n is None:
            return self
        return DecisionPartition(self.chi0[:n], self.chi1[:n], self.classifier_id, self.threshold,
                                 None if self.index0 is None else self.index0[:n],
                                 None if self.index1 is None else self.index1[:n])


# ----------------------------------------------------------------------------
# IDX files


def _open_maybe_gzip(path: Path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX ubyte file (images or labels) into a uint8 array."""
    with _open_maybe_gzip(path) as f:
        header = f.read(4)
        if len(header) < 4:
            raise FormatError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">I", header)
        if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
            raise FormatError(f"{path}: bad IDX magic number 0x{magic:08x}")
        ndim = 3 if magic == IDX_IMAGES_MAGIC else 1
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        payload = f.read()
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx_digits(
    images_path,
    labels_path,
    keep_digits: Iterable[int],
    relabel: Mapping[int, int],
    limit: int | None = None,
) -> LabeledImages:
    """Load the digits in ``keep_digits`` from an IDX image/label file pair.

    ``limit`` restricts the scan to the first ``limit`` records of the file
    before filtering. Pixels are divided by 255, file order is kept.
    """
    keep = sorted(set(int(d) for d in keep_digits))
    if not keep:
        raise ConfigError("keep_digits is empty")
    missing = [d for d in keep if d not in relabel]
    if missing:
        raise ConfigError(f"relabel has no target class for digits {missing}")
    if any(relabel[d] not in (0, 1) for d in keep):
        raise ConfigError("relabel targets must be 0 or 1")

    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError("expected an images file (3 dims) and a labels file (1 dim)")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]

    ids = np.flatnonzero(np.isin(labels, keep))
    lut = np.zeros(256, dtype=np.int64)
    for d in keep:
        lut[d] = relabel[d]
    return LabeledImages(images[ids].astype(np.float32) / 255.0, lut[labels[ids]], ids)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (gzip-compressed if the suffix is .gz)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(array.ndim)
    if magic is None:
        raise ShapeError("IDX writer supports 1-d labels or 3-d images")
    data = struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(data)


# ----------------------------------------------------------------------------
# Generic class folders


def load_image_folder(root, size: int, class_names: Sequence[str] | None = None) -> LabeledImages:
    """Load ``<root>/<class_name>/*.png|pgm`` 8-bit grayscale images.

    Classes are sorted by name unless ``class_names`` fixes the order; exactly two
    classes are required. Images are resized to ``size`` x ``size``.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset directory {root} does not exist")
    if class_names is None:
        class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(class_names) != 2:
        raise ConfigError(f"binary classification needs 2 class folders, found {list(class_names)}")

    images, labels = [], []
    for label, name in enumerate(class_names):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in (".png", ".pgm"))
        for path in files:
            with Image.open(path) as im:
                im = im.convert("L")
                if im.size != (size, size):
                    im = im.resize((size, size), Image.BILINEAR)
                images.append(np.asarray(im, dtype=np.float32) / 255.0)
            labels.append(label)
    if not images:
        return LabeledImages.empty(size, size)
    return LabeledImages(np.stack(images), np.array(labels), np.arange(len(labels)))


# ----------------------------------------------------------------------------
# Splitting and partitioning


def split_dataset(samples: LabeledImages, fractions: Sequence[float], seed: int) -> DatasetSplit:
    """Shuffle with ``seed`` then cut into contiguous train/val/test blocks.

    Block boundaries are ``floor(cumsum(fractions) * n)``, so (0.8, 0.2, 0) on
    11982 samples gives 9585/2397/0.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3:
        raise ConfigError("fractions must have three entries (train, val, test)")
    if any(f < 0 for f in fractions):
        raise ConfigError(f"negative split fraction in {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions sum to {sum(fractions)}, not 1")

    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    cuts = [math.floor(fractions[0] * n + 1e-9), math.floor((fractions[0] + fractions[1]) * n + 1e-9)]
    if fractions[2] == 0:
        cuts[1] = n
    parts = np.split(order, cuts)
    return DatasetSplit(*(samples.subset(p) for p in parts))


def partition_by_decision(images: np.ndarray, classifier, threshold: float = 0.5) -> DecisionPartition:
    """Split real images into chi0/chi1 using ``classifier.decide``.

    A one-sided result is returned with a logged warning; explainer training
    rejects it later.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        empty = images.reshape((0,) + images.shape[1:]) if images.ndim == 3 else np.zeros((0, 0, 0), np.float32)
        return DecisionPartition(empty, empty.copy(), classifier.param_hash(), threshold,
                                 np.zeros(0, np.int64), np.zeros(0, np.int64))
    decisions = classifier.decide(images, threshold)
    index0 = np.flatnonzero(decisions == 0)
    index1 = np.flatnonzero(decisions == 1)
    part = DecisionPartition(images[index0], images[index1], classifier.param_hash(), threshold, index0, index1)
    if part.one_sided:
        logger.warning("decision partition is one-sided: |chi0|=%d |chi1|=%d", len(index0), len(index1))
    return part


# ----------------------------------------------------------------------------
# Synthetic patch data


def make_patch_dataset(
    n_per_class: int,
    image_size: int = 28,
    patch_size: int = 6,
    noise_level: float = 0.2,
    seed: int = 0,
) -> MaskedImages:
    """Balanced noise images; class 1 also carries one bright square patch.

    Background pixels are uniform in [0, noise_level]. The patch replaces the
    background with a constant intensity drawn from [0.8, 1.0]; its mask marks
    exactly the patch pixels. Samples alternate class 0, class 1.
    """
    if patch_size >= image_size:
        raise ConfigError(f"patch_size {patch_size} must be smaller than image_size {image_size}")
    if patch_size < 1:
        raise ConfigError("patch_size must be positive")
    if not 0 <= noise_level < 0.5:
        raise ConfigError(f"noise_level {noise_level} outside [0, 0.5)")

    rng = np.random.default_rng(seed)
    n = 2 * n_per_class
    images = rng.uniform(0.0, noise_level, size=(n, image_size, image_size)).astype(np.float32)
    labels = np.tile([0, 1], n_per_class).astype(np.int64)
    masks = np.zeros((n, image_size, image_size), np.uint8)
    for i in np.flatnonzero(labels == 1):
        r, c = rng.integers(0, image_size - patch_size + 1, size=2)
        images[i, r:r + patch_size, c:c + patch_size] = rng.uniform(0.8, 1.0)
        masks[i, r:r + patch_size, c:c + patch_size] = 1
    return MaskedImages(images, labels, np.arange(n), masks)


def save_arrays(path, manifest: dict | None = None, **arrays) -> str:
    """Write arrays into one ``.npz`` container and an optional JSON sidecar.

    Returns the sha256 of the array contents (names, dtypes, shapes, bytes).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)
    digest = hash_arrays(arrays)
    if manifest is not None:
        manifest = dict(manifest, content_sha256=digest)
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return digest


def hash_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_patch_dataset(path, dataset: MaskedImages, config: dict) -> str:
    return save_arrays(path, {"kind": "patch_dataset", "config": config},
                       images=dataset.images, labels=dataset.labels, ids=dataset.ids, masks=dataset.masks)


def load_patch_dataset(path) -> MaskedImages:
    with np.load(path) as z:
        return MaskedImages(z["images"], z["labels"], z["ids"], z["masks"])


# ----------------------------------------------------------------------------
# Augmentation


@dataclass
class AugmentConfig:
    translate: float = 2.0  # pixels
    rotate: float = 10.0  # degrees
    zoom: float = 0.1  # relative, scale in [1 - zoom, 1 + zoom]
    hflip: bool = False

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(translate=0.0, rotate=0.0, zoom=0.0, hflip=False)

    @property
    def enabled(self) -> bool:
        return self.translate > 0 or self.rotate > 0 or self.zoom > 0 or self.hflip

    def clamped(self) -> "AugmentConfig":
        out = AugmentConfig(
            translate=max(0.0, float(self.translate)),
            rotate=min(max(0.0, float(self.rotate)), 180.0),
            zoom=min(max(0.0, float(self.zoom)), 0.5),
            hflip=bool(self.hflip),
        )
        if out != self:
            warnings.warn(f"augmentation config {self} clamped to {out}", stacklevel=3)
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def augment_batch(images: torch.Tensor, config: AugmentConfig, generator: torch.Generator) -> torch.Tensor:
    """Random affine transform of a (N, H, W) or (N, 1, H, W) batch, one draw per image."""
    config = config.clamped()
    if not config.enabled or len(images) == 0:
        return images.clone()
    squeeze = images.dim() == 3
    x = images.unsqueeze(1) if squeeze else images
    n, _, h, w = x.shape

    def uniform(lo, hi):
        return lo + (hi - lo) * torch.rand(n, generator=generator, dtype=torch.float64)

    angle = torch.deg2rad(uniform(-config.rotate, config.rotate))
    scale = uniform(1.0 - config.zoom, 1.0 + config.zoom)
    tx = uniform(-config.translate, config.translate) * 2.0 / w
    ty = uniform(-config.translate, config.translate) * 2.0 / h
    flip = torch.ones(n, dtype=torch.float64)
    if config.hflip:
        flip = torch.where(torch.rand(n, generator=generator) < 0.5, -1.0, 1.0).double()

    cos, sin = torch.cos(angle) / scale, torch.sin(angle) / scale
    theta = torch.stack([
        torch.stack([cos * flip, -sin, tx], dim=1),
        torch.stack([sin * flip, cos, ty], dim=1),
    ], dim=1).to(x.dtype)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False).clamp(0.0, 1.0)
    return out.squeeze(1) if squeeze else out


def augment(image: np.ndarray, config: AugmentConfig, seed: int) -> np.ndarray:
    """Augment a single (H, W) image deterministically from ``seed``."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ShapeError(f"expected a (H, W) image, got {image.shape}")
    gen = torch.Generator().manual_seed(int(seed))
    out = augment_batch(torch.from_numpy(image[None].copy()), config, gen)
    return out[0].numpy()
