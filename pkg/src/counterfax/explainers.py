"""Counterfactual explainers: generator wiring, explanation maps and training.

An explainer pairs a frozen classifier with generators that move an image
across the classifier's decision boundary (adversarial generation) and back
onto its own side (stable generation). The explanation map is the absolute
difference of the two.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from counterfax.classifier import Classifier, as_batch, decide_from_prob, state_hash
from counterfax.data import AugmentConfig, DecisionPartition, augment_batch
from counterfax.errors import ConfigError
from counterfax.losses import (
    ACTIVE_TERMS,
    LossBreakdown,
    LossWeights,
    Method,
    classifier_bce,
    compose_total,
    discriminator_loss,
    generator_gan_loss,
    l12_distance,
    weight_proximity,
    weighted_total,
)
from counterfax.nets import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    build_shared_generator,
)

logger = logging.getLogger(__name__)

GENERATOR_ROLES = {
    Method.SyCE: ("g0", "g1"),
    Method.CyCE: ("g0", "g1"),
    Method.CyCE_noFc: ("g0", "g1"),
    Method.SSyE: ("g",),
    Method.CyCSAE: ("g0_s", "g0_a", "g1_s", "g1_a"),
}


@dataclass
class TrainSchedule:
    epochs: int = 10
    batch_size: int = 64
    gen_lr: float = 1e-4
    disc_lr: float = 2e-4
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 0 or self.batch_size < 1 or not (self.gen_lr > 0 and self.disc_lr > 0):
            raise ConfigError(f"invalid training schedule {self}")

    def to_dict(self) -> dict:
        return asdict(self)


class FrozenClassifierViolation(RuntimeError):
    pass


class Explainer:
    """One explainer embodiment bound to a frozen classifier.

    ``nets`` holds the trainable generator modules (for CyCSAE one shared-trunk
    module per domain); ``generators`` maps role names to callables on
    (N, 1, H, W) tensors.
    """

    def __init__(self, method: Method, nets: nn.ModuleDict, discriminators: nn.ModuleDict,
                 classifier: Classifier, weights: LossWeights, threshold: float,
                 gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec, seed: int):
        self.method = method
        self.nets = nets
        self.discriminators = discriminators
        self.classifier = classifier
        self.weights = weights
        self.threshold = threshold
        self.gen_spec = gen_spec
        self.disc_spec = disc_spec
        self.seed = seed
        self.classifier_hash = classifier.param_hash()
        self.input_size = classifier.input_size

    @property
    def generators(self) -> dict:
        if self.method is Method.CyCSAE:
            return {f"g{i}_{k[0]}": self.nets[f"g{i}"].view(k) for i in (0, 1) for k in ("stable", "adversarial")}
        return {role: self.nets[role] for role in GENERATOR_ROLES[self.method]}

    # routing -----------------------------------------------------------------

    def adversarial_generator(self, i: int):
        """Generator producing the adversary of an image decided as class ``i``."""
        if self.method is Method.SSyE:
            return self.nets["g"]
        if self.method is Method.CyCSAE:
            return self.nets[f"g{i}"].view("adversarial")
        return self.nets[f"g{i}"]

    def stable_generator(self, i: int):
        if self.method in (Method.CyCE, Method.CyCE_noFc):
            return None
        if self.method is Method.CyCSAE:
            return self.nets[f"g{i}"].view("stable")
        g = self.adversarial_generator(i)
        return lambda x: g(g(x))

    @property
    def has_stable(self) -> bool:
        return self.method not in (Method.CyCE, Method.CyCE_noFc)

    def check_classifier(self) -> None:
        if self.classifier.param_hash() != self.classifier_hash:
            raise FrozenClassifierViolation("classifier parameters changed during explainer use")

    def train_mode(self, on: bool) -> None:
        self.nets.train(on)
        self.discriminators.train(on)

    # inference ---------------------------------------------------------------

    @torch.no_grad()
    def _generate(self, images, kind: str, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
        x = as_batch(images, self.input_size, self.input_size)
        domains = decide_from_prob(self.classifier.predict_prob(x), self.threshold)
        was_training = self.nets.training
        self.nets.eval()
        out = x.clone()
        for i in (0, 1):
            idx = torch.from_numpy(np.flatnonzero(domains == i))
            if len(idx) == 0:
                continue
            gen = self.adversarial_generator(i) if kind == "adversarial" else self.stable_generator(i)
            if gen is None:
                continue
            for s in range(0, len(idx), batch_size):
                chunk = idx[s:s + batch_size]
                out[chunk] = gen(x[chunk])
        self.nets.train(was_training)
        return out[:, 0].numpy(), domains

    def _shaped(self, images, out: np.ndarray) -> np.ndarray:
        return out[0] if np.ndim(images) == 2 else out

    def adversary(self, images) -> np.ndarray:
        return self._shaped(images, self._generate(images, "adversarial")[0])

    def stable(self, images) -> np.ndarray:
        return self._shaped(images, self._generate(images, "stable")[0])

    def explanation_map(self, images) -> np.ndarray:
        return np.abs(self.stable(images) - self.adversary(images))

    def explain(self, images) -> dict:
        """Stable image, adversary, map and decision for each image in one pass."""
        stable = self.stable(images)
        adv = self.adversary(images)
        return {"stable": stable, "adversary": adv, "map": np.abs(stable - adv),
                "decision": self.classifier.decide(images, self.threshold)}

    # persistence ---------------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "method": self.method.value,
            "gen_spec": self.gen_spec.to_dict(),
            "disc_spec": self.disc_spec.to_dict(),
            "weights": self.weights.to_dict(),
            "threshold": self.threshold,
            "seed": self.seed,
            "classifier_hash": self.classifier_hash,
            "input_size": self.input_size,
        }

    def param_hash(self) -> str:
        return state_hash(nn.ModuleDict({"nets": self.nets, "discriminators": self.discriminators}))

    def save(self, path, extra: dict | None = None) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"nets.{k}": v.numpy() for k, v in self.nets.state_dict().items()}
        arrays.update({f"discriminators.{k}": v.numpy() for k, v in self.discriminators.state_dict().items()})
        np.savez(path, **arrays)
        digest = self.param_hash()
        manifest = dict(self.manifest(), param_sha256=digest, **(extra or {}))
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return digest

    @classmethod
    def load(cls, path, classifier: Classifier) -> "Explainer":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        if manifest["classifier_hash"] != classifier.param_hash():
            raise ConfigError("explainer checkpoint was trained against a different classifier")
        explainer = build_explainer(
            manifest["method"], GeneratorSpec(**manifest["gen_spec"]), DiscriminatorSpec(**manifest["disc_spec"]),
            classifier, LossWeights(**manifest["weights"]), manifest["threshold"], manifest["seed"])
        with np.load(path) as z:
            nets = {k[len("nets."):]: torch.from_numpy(z[k]) for k in z.files if k.startswith("nets.")}
            discs = {k[len("discriminators."):]: torch.from_numpy(z[k]) for k in z.files
                     if k.startswith("discriminators.")}
        explainer.nets.load_state_dict(nets)
        explainer.discriminators.load_state_dict(discs)
        return explainer


def build_explainer(method, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec, classifier: Classifier,
                    weights: LossWeights, threshold: float = 0.5, seed: int = 0) -> Explainer:
    method = Method.parse(method) if not isinstance(method, Method) else method
    if not classifier.frozen:
        raise ConfigError("the classifier must be trained and frozen before building an explainer")
    weights.require(method)
    size = classifier.input_size
    if method is Method.SSyE:
        nets = nn.ModuleDict({"g": build_generator(gen_spec, size, seed)})
    elif method is Method.CyCSAE:
        nets = nn.ModuleDict({f"g{i}": build_shared_generator(gen_spec, size, seed + i) for i in (0, 1)})
    else:
        nets = nn.ModuleDict({f"g{i}": build_generator(gen_spec, size, seed + i) for i in (0, 1)})
    discs = nn.ModuleDict({f"D{i}": build_discriminator(disc_spec, size, seed + 10 + i) for i in (0, 1)})
    return Explainer(method, nets, discs, classifier, weights, threshold, gen_spec, disc_spec, seed)


# ----------------------------------------------------------------------------
# Training


@dataclass
class OptState:
    gen_opt: torch.optim.Optimizer
    disc_opt: torch.optim.Optimizer
    rng: torch.Generator
    step: int = 0


def init_opt_state(explainer: Explainer, schedule: TrainSchedule | None = None) -> OptState:
    schedule = schedule or TrainSchedule()
    gen_opt = torch.optim.Adam(explainer.nets.parameters(), lr=schedule.gen_lr, betas=(0.9, 0.999))
    disc_opt = torch.optim.Adam(explainer.discriminators.parameters(), lr=schedule.disc_lr, betas=(0.9, 0.999))
    return OptState(gen_opt, disc_opt, torch.Generator().manual_seed(schedule.seed))


def domain_terms(explainer: Explainer, x: torch.Tensor, i: int) -> dict:
    """Generator-side loss terms for a batch ``x`` whose recorded decision is ``i``.

    Intermediate generations are shared between terms; only the method's active
    terms are computed.
    """
    f = explainer.classifier
    active = ACTIVE_TERMS[explainer.method]
    dec = torch.full((len(x),), float(i))
    g = explainer.adversarial_generator(i)
    a = g(x)
    terms = {"L_D_g": generator_gan_loss(explainer.discriminators[f"D{1 - i}"], a)}
    if "L_fc_a" in active:
        terms["L_fc_a"] = classifier_bce(f, 1.0 - dec, a)
    if "L_d_s" in active:
        s = explainer.nets[f"g{i}"](x, "stable") if explainer.method is Method.CyCSAE else g(a)
        terms["L_d_s"] = l12_distance(x, s)
        terms["L_fc_s"] = classifier_bce(f, dec, s)
    if "L_d_cy" in active:
        c = explainer.adversarial_generator(1 - i)(a)
        terms["L_d_cy"] = l12_distance(x, c)
        if "L_fc_cy" in active:
            terms["L_fc_cy"] = classifier_bce(f, dec, c)
    if "L_w" in active:
        heads = explainer.nets[f"g{i}"].heads
        terms["L_w"] = weight_proximity(heads["stable"].parameters(), heads["adversarial"].parameters())
    return terms


def _set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def train_step(explainer: Explainer, batch0: torch.Tensor, batch1: torch.Tensor, opt_state: OptState):
    """One three-phase update: generators on chi0, generators on chi1, then both discriminators.

    Returns ``({"phase0": LossBreakdown, "phase1": LossBreakdown, "disc": dict}, opt_state)``.
    """
    if len(batch0) == 0 or len(batch1) == 0:
        raise ConfigError("train_step needs non-empty batches from both domains")
    explainer.train_mode(True)
    out = {}

    _set_requires_grad(explainer.discriminators, False)
    for i, x in ((0, batch0), (1, batch1)):
        terms = domain_terms(explainer, x, i)
        loss = weighted_total(terms, explainer.weights, explainer.method)
        opt_state.gen_opt.zero_grad(set_to_none=True)
        loss.backward()
        opt_state.gen_opt.step()
        out[f"phase{i}"] = compose_total({k: v.detach() for k, v in terms.items()},
                                         explainer.weights, explainer.method)
    _set_requires_grad(explainer.discriminators, True)

    with torch.no_grad():
        fake1 = explainer.adversarial_generator(0)(batch0)  # lands in chi1
        fake0 = explainer.adversarial_generator(1)(batch1)  # lands in chi0
    total_d, parts = 0.0, {}
    for j, real, fake in ((0, batch0, fake0), (1, batch1, fake1)):
        d_total, l_d, l_gp = discriminator_loss(explainer.discriminators[f"D{j}"], real, fake,
                                                explainer.weights, opt_state.rng)
        total_d = total_d + d_total
        parts[f"D{j}_L_D"] = float(l_d.detach())
        parts[f"D{j}_L_gp"] = float(l_gp.detach())
    opt_state.disc_opt.zero_grad(set_to_none=True)
    total_d.backward()
    opt_state.disc_opt.step()
    parts["total"] = float(total_d.detach())
    out["disc"] = parts
    opt_state.step += 1
    return out, opt_state


def paired_batches(n0: int, n1: int, batch_size: int, rng: torch.Generator):
    """Index batches for one epoch: the larger side is exhausted once, the smaller cycles with reshuffling."""
    big, small = (n0, n1) if n0 >= n1 else (n1, n0)
    order_big = torch.randperm(big, generator=rng)
    order_small = torch.randperm(small, generator=rng)
    pos = 0
    for start in range(0, big, batch_size):
        ib = order_big[start:start + batch_size]
        take, have = [], 0
        while have < len(ib):
            if pos == small:
                order_small = torch.randperm(small, generator=rng)
                pos = 0
            k = min(len(ib) - have, small - pos)
            take.append(order_small[pos:pos + k])
            pos += k
            have += k
        js = torch.cat(take)
        yield (ib, js) if n0 >= n1 else (js, ib)


def flip_rates(explainer: Explainer, images: np.ndarray) -> dict:
    """Fraction of adversaries that change the decision, and of stable images that keep it."""
    if len(images) == 0:
        return {"adv_flip": float("nan"), "stable_keep": float("nan")}
    dec = explainer.classifier.decide(images, explainer.threshold)
    adv = explainer.adversary(images)
    rates = {"adv_flip": float((explainer.classifier.decide(adv, explainer.threshold) != dec).mean())}
    stable = explainer.stable(images)
    rates["stable_keep"] = float((explainer.classifier.decide(stable, explainer.threshold) == dec).mean())
    return rates


def _mean_breakdowns(items: list[LossBreakdown]) -> dict:
    if not items:
        return {}
    keys = items[0].to_dict().keys()
    return {k: float(np.mean([getattr(b, k) for b in items])) for k in keys}


def fit(explainer: Explainer, partition: DecisionPartition, schedule: TrainSchedule,
        val_partition: DecisionPartition | None = None, opt_state: OptState | None = None,
        on_step: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Train for ``schedule.epochs`` epochs; returns per-epoch history records.

    Validation flip rates use ``val_partition`` when given, otherwise a slice of
    up to 256 images per side held out from ``partition``. ``on_step`` receives
    the step index and the per-phase loss breakdowns after every train step.
    """
    if partition.one_sided:
        raise ConfigError(f"both partition sides must be non-empty (|chi0|={len(partition.chi0)}, "
                          f"|chi1|={len(partition.chi1)})")
    explainer.check_classifier()
    if schedule.epochs == 0:
        return []

    train0, train1 = partition.chi0, partition.chi1
    if val_partition is None:
        k0, k1 = min(256, len(train0) // 5), min(256, len(train1) // 5)
        val = np.concatenate([train0[:k0], train1[:k1]])
        train0, train1 = train0[k0:], train1[k1:]
    else:
        val = np.concatenate([val_partition.chi0[:256], val_partition.chi1[:256]])

    torch.manual_seed(schedule.seed)
    opt_state = opt_state or init_opt_state(explainer, schedule)
    for group in opt_state.gen_opt.param_groups:
        group["lr"] = schedule.gen_lr
    for group in opt_state.disc_opt.param_groups:
        group["lr"] = schedule.disc_lr
    rng = torch.Generator().manual_seed(schedule.seed + 1)
    x0_all = torch.from_numpy(np.ascontiguousarray(train0))
    x1_all = torch.from_numpy(np.ascontiguousarray(train1))

    history = []
    for epoch in range(schedule.epochs):
        phase0, phase1, disc = [], [], []
        for i0, i1 in paired_batches(len(x0_all), len(x1_all), schedule.batch_size, rng):
            b0 = augment_batch(x0_all[i0], schedule.augment, rng)[:, None]
            b1 = augment_batch(x1_all[i1], schedule.augment, rng)[:, None]
            out, opt_state = train_step(explainer, b0, b1, opt_state)
            phase0.append(out["phase0"])
            phase1.append(out["phase1"])
            disc.append(out["disc"]["total"])
            if on_step is not None:
                on_step(opt_state.step, {"phase0": out["phase0"].to_dict(), "phase1": out["phase1"].to_dict(),
                                         "disc": out["disc"]})
        record = {
            "epoch": epoch,
            "phase0": _mean_breakdowns(phase0),
            "phase1": _mean_breakdowns(phase1),
            "disc_total": float(np.mean(disc)),
            "val": flip_rates(explainer, val),
        }
        history.append(record)
        logger.info("%s epoch %d gen %.4f/%.4f disc %.4f val flip %.3f", explainer.method.value, epoch,
                    record["phase0"]["total"], record["phase1"]["total"], record["disc_total"],
                    record["val"]["adv_flip"])
    explainer.train_mode(False)
    explainer.check_classifier()
    return history
