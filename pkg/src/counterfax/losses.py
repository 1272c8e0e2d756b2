"""Loss terms of the explainer objective and their weighted aggregation.

All functions take (N, 1, H, W) tensors. Generators are any callables mapping
such a batch to a batch of the same shape; the classifier returns
probabilities and the discriminators return logits.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping

import torch
import torch.nn.functional as F

from counterfax.classifier import PROB_EPS
from counterfax.errors import ConfigError, ShapeError, UndefinedMetricError


class Method(str, enum.Enum):
    SyCE = "SyCE"
    CyCE = "CyCE"
    CyCE_noFc = "CyCE_noFc"
    SSyE = "SSyE"
    CyCSAE = "CyCSAE"

    @classmethod
    def parse(cls, value) -> "Method":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"unknown method {value!r}; valid methods: {', '.join(m.value for m in cls)}") from None


LOGIT_CAP = 1e4  # keeps +-inf logits finite

TERM_NAMES = ("L_fc_a", "L_D_g", "L_d_s", "L_fc_s", "L_d_cy", "L_fc_cy", "L_w")

TERM_WEIGHT = {
    "L_fc_a": "lambda_fc_a",
    "L_D_g": "lambda_D",
    "L_d_s": "lambda_d_s",
    "L_fc_s": "lambda_fc_s",
    "L_d_cy": "lambda_d_cy",
    "L_fc_cy": "lambda_fc_cy",
    "L_w": "lambda_w",
}

ACTIVE_TERMS = {
    Method.SyCE: ("L_fc_a", "L_D_g", "L_d_s", "L_fc_s", "L_d_cy", "L_fc_cy"),
    Method.CyCE: ("L_fc_a", "L_D_g", "L_d_cy", "L_fc_cy"),
    Method.CyCE_noFc: ("L_D_g", "L_d_cy"),
    Method.SSyE: ("L_fc_a", "L_D_g", "L_d_s", "L_fc_s"),
    Method.CyCSAE: ("L_fc_a", "L_D_g", "L_d_s", "L_fc_s", "L_d_cy", "L_fc_cy", "L_w"),
}

DISCRIMINATOR_WEIGHTS = ("lambda_D_d", "lambda_gp_d")


@dataclass
class LossWeights:
    """Weights of the generator and discriminator objectives.

    ``None`` marks a weight as not provided; methods that need it reject the set.
    """

    lambda_d_s: float | None = None
    lambda_d_cy: float | None = None
    lambda_fc_a: float | None = None
    lambda_fc_s: float | None = None
    lambda_fc_cy: float | None = None
    lambda_D: float | None = None
    lambda_D_d: float | None = None
    lambda_gp_d: float | None = None
    lambda_w: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and v < 0:
                raise ConfigError(f"{f.name} = {v} is negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def require(self, method: Method) -> None:
        needed = [TERM_WEIGHT[t] for t in ACTIVE_TERMS[Method(method)]] + list(DISCRIMINATOR_WEIGHTS)
        missing = [name for name in needed if getattr(self, name) is None]
        if missing:
            raise ConfigError(f"{Method(method).value} needs weights {missing}")

    @classmethod
    def digits(cls, method) -> "LossWeights":
        """Digit-problem defaults (LeNet rows of the published parameter tables)."""
        method = Method(method)
        if method is Method.SyCE:
            return cls(10.0, 2.0, 0.2, 0.01, 0.005, 0.25, 1.0, 1.0)
        if method is Method.CyCE:
            return cls(lambda_d_cy=10.0, lambda_fc_a=0.2, lambda_fc_cy=0.005, lambda_D=0.25,
                       lambda_D_d=1.0, lambda_gp_d=1.0)
        if method is Method.CyCE_noFc:
            return cls(lambda_d_cy=10.0, lambda_D=0.25, lambda_D_d=1.0, lambda_gp_d=1.0)
        if method is Method.SSyE:
            return cls(lambda_d_s=10.0, lambda_fc_a=0.2, lambda_fc_s=0.01, lambda_D=0.25,
                       lambda_D_d=1.0, lambda_gp_d=1.0)
        return cls(10.0, 2.0, 0.2, 0.01, 0.005, 0.25, 1.0, 1.0, lambda_w=1.0)


@dataclass
class LossBreakdown:
    L_fc_a: float = 0.0
    L_D_g: float = 0.0
    L_d_s: float = 0.0
    L_fc_s: float = 0.0
    L_d_cy: float = 0.0
    L_fc_cy: float = 0.0
    L_w: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# Elementary terms


def _safe_sqrt(v: torch.Tensor) -> torch.Tensor:
    # sqrt with a zero (not NaN) gradient at 0
    pos = v > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, v, torch.ones_like(v))), torch.zeros_like(v))


def l12_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batch mean of 0.5 * (mean |a-b| + sqrt(mean (a-b)^2)), per image."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a - b).flatten(1)
    l1 = diff.abs().mean(dim=1)
    l2 = _safe_sqrt(diff.pow(2).mean(dim=1))
    return (0.5 * (l1 + l2)).mean()


def bce(target, prob: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy on probabilities clamped to [1e-7, 1 - 1e-7], batch-averaged."""
    target = torch.as_tensor(target, dtype=prob.dtype)
    prob = prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * torch.log(prob) + (1.0 - target) * torch.log(1.0 - prob)).mean()


def bce_logits(target, logits: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy from logits, batch-averaged.

    Equal to ``bce(target, sigmoid(logits))`` wherever the probability lies
    inside the clamp interval, but keeps a nonzero gradient when the sigmoid
    saturates (a confident classifier or discriminator would otherwise stop
    the generator's training signal).
    """
    target = torch.as_tensor(target, dtype=logits.dtype).expand_as(logits)
    z = logits.clamp(-LOGIT_CAP, LOGIT_CAP)
    return F.binary_cross_entropy_with_logits(z, target)


def classifier_bce(classifier, target, x: torch.Tensor) -> torch.Tensor:
    """BCE of the classifier's output on ``x``; uses ``classifier.logits`` when available."""
    logits = getattr(classifier, "logits", None)
    if logits is None:
        return bce(target, classifier(x))
    return bce_logits(target, logits(x).reshape(len(x)))


def _decisions(dec, x: torch.Tensor, side: int) -> torch.Tensor:
    if dec is None:
        return torch.full((len(x),), float(side), dtype=x.dtype)
    return torch.as_tensor(dec, dtype=x.dtype).reshape(len(x))


def _nonempty(x) -> bool:
    return x is not None and len(x) > 0


def _both_sides(fn, batch0, batch1, dec0, dec1, g0, g1):
    if not (_nonempty(batch0) or _nonempty(batch1)):
        raise UndefinedMetricError("both batches are empty")
    total = 0.0
    if _nonempty(batch0):
        total = total + fn(g0, batch0, _decisions(dec0, batch0, 0))
    if _nonempty(batch1):
        total = total + fn(g1, batch1, _decisions(dec1, batch1, 1))
    return total


def adversarial_classification_loss(classifier, g0, g1, batch0, batch1, dec0=None, dec1=None):
    """BCE of f(g_i(x)) against the flipped recorded decision, summed over both domains."""
    return _both_sides(lambda g, x, d: classifier_bce(classifier, 1.0 - d, g(x)), batch0, batch1, dec0, dec1, g0, g1)


def gan_discriminator_term(d_target, real_batch, fake_batch) -> torch.Tensor:
    return bce_logits(1.0, d_target(real_batch)) + bce_logits(0.0, d_target(fake_batch))


def generator_gan_loss(d_target, fake_batch) -> torch.Tensor:
    """Non-saturating generator objective: BCE(1, D(fake))."""
    return bce_logits(1.0, d_target(fake_batch))


def gradient_penalty(d, real_batch, fake_batch, generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean (||grad_x D(x_hat)||_2 - 1)^2 on random real/fake interpolates."""
    if real_batch.shape != fake_batch.shape:
        raise ShapeError("real and fake batches must have the same shape")
    eps = torch.rand((len(real_batch),) + (1,) * (real_batch.dim() - 1), generator=generator,
                     dtype=real_batch.dtype)
    x_hat = (eps * real_batch.detach() + (1.0 - eps) * fake_batch.detach()).requires_grad_(True)
    out = d(x_hat)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    norm = _safe_sqrt(grad.flatten(1).pow(2).sum(dim=1))
    return (norm - 1.0).pow(2).mean()


def discriminator_loss(d, real_batch, fake_batch, weights: LossWeights, generator=None):
    """lambda_D_d * L_D + lambda_gp_d * L_gp; returns (total, L_D, L_gp)."""
    n = min(len(real_batch), len(fake_batch))
    l_d = gan_discriminator_term(d, real_batch, fake_batch)
    l_gp = gradient_penalty(d, real_batch[:n], fake_batch[:n], generator)
    return weights.lambda_D_d * l_d + weights.lambda_gp_d * l_gp, l_d, l_gp


def symmetry_losses(classifier, g0, g1, batch0, batch1, dec0=None, dec1=None):
    """(L_d_s, L_fc_s): distance of x to g_i(g_i(x)) and its classification against c(x)."""
    def dist(g, x, d):
        return l12_distance(x, g(g(x)))

    def cls(g, x, d):
        return classifier_bce(classifier, d, g(g(x)))

    return (_both_sides(dist, batch0, batch1, dec0, dec1, g0, g1),
            _both_sides(cls, batch0, batch1, dec0, dec1, g0, g1))


def stable_losses(classifier, gs0, gs1, batch0, batch1, dec0=None, dec1=None):
    """(L_d_s, L_fc_s) for explicit stable generators (CyCSAE)."""
    return (_both_sides(lambda g, x, d: l12_distance(x, g(x)), batch0, batch1, dec0, dec1, gs0, gs1),
            _both_sides(lambda g, x, d: classifier_bce(classifier, d, g(x)), batch0, batch1, dec0, dec1, gs0, gs1))


def cycle_losses(classifier, g0, g1, batch0, batch1, dec0=None, dec1=None):
    """(L_d_cy, L_fc_cy): x vs g1(g0(x)) on chi0 and x vs g0(g1(x)) on chi1."""
    def cyc(g, x):
        partner = g1 if g is g0 else g0
        return partner(g(x))

    if g0 is g1:
        def cyc(g, x):  # noqa: F811  single-generator case
            return g(g(x))

    return (_both_sides(lambda g, x, d: l12_distance(x, cyc(g, x)), batch0, batch1, dec0, dec1, g0, g1),
            _both_sides(lambda g, x, d: classifier_bce(classifier, d, cyc(g, x)), batch0, batch1, dec0, dec1, g0, g1))


def weight_proximity(params_a: Iterable[torch.Tensor], params_b: Iterable[torch.Tensor]) -> torch.Tensor:
    """Squared Euclidean distance between parameter collections, divided by the parameter count."""
    params_a, params_b = list(params_a), list(params_b)
    if len(params_a) != len(params_b) or any(a.shape != b.shape for a, b in zip(params_a, params_b)):
        raise ShapeError("parameter collections do not correspond")
    count = sum(a.numel() for a in params_a)
    if count == 0:
        return torch.zeros(())
    return sum((a - b).pow(2).sum() for a, b in zip(params_a, params_b)) / count


# ----------------------------------------------------------------------------
# Aggregation


def weighted_total(terms: Mapping[str, torch.Tensor | float], weights: LossWeights, method) -> torch.Tensor | float:
    """Weighted sum of the method's active terms (missing terms count as zero)."""
    method = Method(method)
    total = 0.0
    for name in ACTIVE_TERMS[method]:
        w = getattr(weights, TERM_WEIGHT[name])
        if w is None:
            raise ConfigError(f"{TERM_WEIGHT[name]} is required by {method.value}")
        if w < 0:
            raise ConfigError(f"{TERM_WEIGHT[name]} = {w} is negative")
        if name in terms:
            total = total + w * terms[name]
    return total


def compose_total(terms: Mapping[str, torch.Tensor | float], weights: LossWeights, method) -> LossBreakdown:
    """Breakdown with inactive terms zeroed and ``total`` the exact weighted float sum."""
    method = Method(method)
    active = ACTIVE_TERMS[method]
    values = {name: float(terms.get(name, 0.0)) if name in active else 0.0 for name in TERM_NAMES}
    total = weighted_total(values, weights, method)
    return LossBreakdown(**values, total=float(total))


def recompute_total(breakdown: LossBreakdown, weights: LossWeights, method) -> float:
    values = {name: getattr(breakdown, name) for name in TERM_NAMES}
    return float(weighted_total(values, weights, method))
