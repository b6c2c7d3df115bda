"""Alternating two-network training loop, margin schedule, and ablation variants.

Per batch the generator updates first (encoder frozen, gradients flowing
through it into the rotation and mask parameters), then hard variants are
regenerated with the fresh generator and treated as constants while the
encoder updates. All randomness derives from the config seed through fixed
stream labels, so runs and checkpoint resumes are bit-exact.
"""

import csv
import hashlib
import io
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import ConfigurationError, assemble_batch
from .encoder import EncoderSpec, HashEncoder
from .generator import (
    BAND_WIDTH_DEG,
    HardSampleGenerator,
    HardVariantSet,
    MaskPair,
    rotate,
)
from .losses import (
    LossWeights,
    anet_objective,
    fixed_paced_loss,  # noqa: F401  (re-exported; used by the fixed-paced variant)
    hnet_objective,
    pair_tensors,
)

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_adversarial", "random_rotate", "random_mask",
            "marn_only", "msmn_only", "fixed_paced")

CSV_COLUMNS = ("epoch", "omega", "lr",
               "anet_total", "anet_sp", "anet_sem", "anet_quan",
               "hnet_total", "hnet_sem", "hnet_con", "hnet_quan",
               "labeled_pairs", "no_pair_batches")


class DivergenceError(RuntimeError):
    """A loss went non-finite; carries the path of the diagnostic dump."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def parse_variant(tag):
    """Split a variant tag into (name, fixed margin or None).

    Accepts the plain names plus "fixed_paced(<omega>)".
    """
    m = re.fullmatch(r"fixed_paced\(([^)]+)\)", tag.strip())
    if m:
        margin = float(m.group(1))
        if margin <= 0:
            raise ConfigurationError("fixed_paced margin must be positive")
        return "fixed_paced", margin
    if tag in VARIANTS:
        if tag == "fixed_paced":
            raise ConfigurationError("fixed_paced requires a margin, e.g. fixed_paced(1.0)")
        return tag, None
    raise ConfigurationError(f"unknown variant {tag!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    omega0: float = 0.1
    omega_step: float = 0.02
    omega_period: int = 5
    bands: int = 3
    code_length: int = 12
    image_size: int = 28
    seed: int = 0
    variant: str = "full"
    mask_layers: tuple = (0, 1, 2)
    mask_hidden: int = 16

    def __post_init__(self):
        for name in ("epochs", "batch_size", "omega_period", "bands"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("learning_rate", "omega0", "omega_step"):
            if getattr(self, name) < 0 or (name == "learning_rate"
                                           and self.learning_rate == 0):
                raise ConfigurationError(f"{name} must be positive")
        parse_variant(self.variant)

    @property
    def variant_name(self):
        return parse_variant(self.variant)[0]

    @property
    def fixed_margin(self):
        return parse_variant(self.variant)[1]


def margin_schedule(epoch, cfg):
    """Base margin at an epoch: omega0 + omega_step * floor(epoch / period).

    Applies to the self-paced margin; the fixed-paced variant uses its
    constant margin instead.
    """
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return cfg.omega0 + cfg.omega_step * (epoch // cfg.omega_period)


def derive_seed(master, label):
    """Stable per-component seed stream derived from one master seed."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def baseline_random_rotate(images, rng, bands):
    """Rotations drawn uniformly from each band, sign included; no learning."""
    b = images.shape[0]
    mags = rng.uniform(
        BAND_WIDTH_DEG * np.arange(bands)[:, None],
        BAND_WIDTH_DEG * (np.arange(bands)[:, None] + 1),
        size=(bands, b),
    )
    signs = rng.choice([-1.0, 1.0], size=(bands, b))
    angles = torch.from_numpy(mags * signs).to(images.dtype)
    rotated = torch.stack([rotate(images, angles[n]) for n in range(bands)])
    return HardVariantSet(angles, rotated, tuple(None for _ in range(bands)))


def baseline_random_mask(shape, rng, concentrated=0.9, half_width=0.1):
    """Raw masks whose post-activation values match the stated concentration.

    With probability ``concentrated`` the additive value tanh(am) is uniform
    in [-0.1, 0.1] and the multiplicative gate sigmoid(pm) uniform in
    [0, 0.1]; otherwise each is uniform over the remainder of its range
    ((-1, 1) additive, [0, 1) multiplicative).
    """
    eps = 1e-9
    add = np.where(
        rng.random(shape) < concentrated,
        rng.uniform(-half_width, half_width, shape),
        rng.choice([-1.0, 1.0], shape) * rng.uniform(half_width, 1.0 - eps, shape),
    )
    gate = np.where(
        rng.random(shape) < concentrated,
        rng.uniform(eps, half_width, shape),
        rng.uniform(half_width, 1.0 - eps, shape),
    )
    am_raw = np.arctanh(add)
    pm_raw = np.log(gate) - np.log1p(-gate)
    return am_raw, pm_raw


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


class Trainer:
    """Runs the alternating optimization on a training view of a dataset.

    The dataset must already hide the labels of its unlabeled pool (see
    ImageDataset.hide_labels_except). Pass an out_dir to stream one CSV row
    per epoch and keep a resumable checkpoint.
    """

    def __init__(self, cfg, dataset, out_dir=None):
        if len(dataset) == 0:
            raise ConfigurationError("empty training dataset")
        c, h, w = dataset.image_shape
        if h != cfg.image_size or w != cfg.image_size:
            raise ConfigurationError(
                f"dataset images are {h}x{w}, config says {cfg.image_size}"
            )
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = out_dir
        self.epoch = 0
        self.update_log = []

        # single-threaded torch: tiny tensors gain nothing from threading
        # here, and a fixed reduction order keeps runs reproducible
        torch.set_num_threads(1)
        torch.manual_seed(derive_seed(cfg.seed, "init"))
        spec = EncoderSpec(
            code_length=cfg.code_length,
            in_channels=c,
            image_size=cfg.image_size,
            mask_layers=tuple(cfg.mask_layers),
        )
        self.encoder = HashEncoder(spec)
        self.generator = self._build_generator(spec)
        self.opt_encoder = torch.optim.SGD(
            self.encoder.parameters(), lr=cfg.learning_rate,
            momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        )
        self.opt_generator = None
        if self.generator is not None:
            self.opt_generator = torch.optim.SGD(
                self.generator.parameters(), lr=cfg.learning_rate,
                momentum=cfg.momentum, weight_decay=cfg.weight_decay,
            )
        self.batch_rng = np.random.default_rng(derive_seed(cfg.seed, "batches"))
        self.baseline_rng = np.random.default_rng(derive_seed(cfg.seed, "baseline"))

    def _build_generator(self, spec):
        name = self.cfg.variant_name
        if name in ("no_adversarial", "random_rotate", "random_mask"):
            return None
        return HardSampleGenerator(
            spec,
            bands=self.cfg.bands,
            use_rotation=name in ("full", "fixed_paced", "marn_only"),
            use_masks=name in ("full", "fixed_paced", "msmn_only"),
            mask_hidden=self.cfg.mask_hidden,
        )

    # --- variant plumbing ---------------------------------------------------

    def _trainable_adversary(self):
        return self.generator is not None

    def _make_variants(self, images):
        """Hard variants for the current variant tag, or None."""
        name = self.cfg.variant_name
        if name == "no_adversarial":
            return None
        if name == "random_rotate":
            return baseline_random_rotate(images, self.baseline_rng, self.cfg.bands)
        if name == "random_mask":
            return self._random_mask_variants(images)
        return self.generator.generate(images, self.encoder)

    def _random_mask_variants(self, images):
        b = images.shape[0]
        spec = self.encoder.spec
        bands_masks = []
        for _ in range(self.cfg.bands):
            masks = {}
            d = self.cfg.image_size
            for m in sorted(spec.mask_layers):
                dm = d if m == 0 else math.ceil(d / (spec.stride ** m))
                am_raw, pm_raw = baseline_random_mask((b, 1, dm, dm),
                                                      self.baseline_rng)
                masks[m] = MaskPair(
                    torch.from_numpy(am_raw).to(images.dtype),
                    torch.from_numpy(pm_raw).to(images.dtype),
                    m,
                )
            bands_masks.append(masks)
        angles = torch.zeros(self.cfg.bands, b, dtype=images.dtype)
        return HardVariantSet(
            angles, images.unsqueeze(0).expand(self.cfg.bands, *images.shape),
            tuple(bands_masks),
        )

    # --- the two alternating steps -------------------------------------------

    def _margin_mode(self):
        if self.cfg.variant_name == "fixed_paced":
            return "fixed", self.cfg.fixed_margin
        return "self_paced", None

    def _generator_step(self, images, pairs, omega):
        """Update the generator against the frozen encoder."""
        _set_requires_grad(self.encoder, False)
        with torch.no_grad():
            mu = self.encoder.encode(images)
        variants = self.generator.generate(images, self.encoder)
        mu_hard = self.encoder.encode_variants(variants)
        mode, fixed = self._margin_mode()
        parts = anet_objective(mu, mu_hard, *pairs, self.cfg.weights,
                               fixed if mode == "fixed" else omega, mode)
        self.opt_generator.zero_grad()
        parts["total"].backward()
        self.opt_generator.step()
        self.update_log.append("A")
        _set_requires_grad(self.encoder, True)
        return parts

    def _encoder_step(self, images, pairs):
        """Update the encoder against constant hard variants."""
        variants = None
        if self.cfg.variant_name != "no_adversarial":
            with torch.no_grad():
                variants = self._make_variants(images)
            variants = variants.detached()
        mu = self.encoder.encode(images)
        mu_hard = self.encoder.encode_variants(variants) if variants else None
        parts = hnet_objective(mu, mu_hard, *pairs, self.cfg.weights)
        self.opt_encoder.zero_grad()
        parts["total"].backward()
        self.opt_encoder.step()
        self.update_log.append("H")
        return parts

    def _check_finite(self, parts, context):
        bad = {k: v for k, v in parts.items()
               if isinstance(v, torch.Tensor) and not torch.isfinite(v).all()}
        if bad:
            dump = self._dump_divergence(context, sorted(bad))
            raise DivergenceError(
                f"non-finite loss components {sorted(bad)} during {context}",
                dump_path=dump,
            )

    def _dump_divergence(self, context, components):
        if self.out_dir is None:
            return None
        path = os.path.join(self.out_dir, "divergence_dump.pt")
        torch.save({
            "context": context,
            "components": components,
            "epoch": self.epoch,
            "encoder": self.encoder.state_dict(),
            "generator": (self.generator.state_dict()
                          if self.generator is not None else None),
        }, path)
        return path

    # --- epoch loop -----------------------------------------------------------

    def _lr_for_epoch(self, epoch):
        if epoch >= (2 * self.cfg.epochs) // 3:
            return self.cfg.learning_rate * self.cfg.lr_decay
        return self.cfg.learning_rate

    def train_epoch(self):
        """One pass over the data; returns the epoch's mean loss components."""
        cfg = self.cfg
        omega = margin_schedule(self.epoch, cfg)
        lr = self._lr_for_epoch(self.epoch)
        for group in self.opt_encoder.param_groups:
            group["lr"] = lr
        if self.opt_generator is not None:
            for group in self.opt_generator.param_groups:
                group["lr"] = lr

        order = self.batch_rng.permutation(len(self.dataset))
        sums = {key: 0.0 for key in CSV_COLUMNS[3:]}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            indices = order[start:start + cfg.batch_size]
            if len(indices) < 2:
                continue
            batch = assemble_batch(indices, self.dataset)
            images = torch.from_numpy(self.dataset.images[indices].copy())
            pairs = pair_tensors(batch)

            if self._trainable_adversary():
                a_parts = self._generator_step(images, pairs, omega)
                self._check_finite(a_parts, f"generator step, epoch {self.epoch}")
                sums["anet_total"] += a_parts["total"].item()
                sums["anet_sp"] += a_parts["sp"].item()
                sums["anet_sem"] += a_parts["sem"].item()
                sums["anet_quan"] += a_parts["quan"].item()

            h_parts = self._encoder_step(images, pairs)
            self._check_finite(h_parts, f"encoder step, epoch {self.epoch}")
            sums["hnet_total"] += h_parts["total"].item()
            sums["hnet_sem"] += h_parts["sem"].item()
            sums["hnet_con"] += h_parts["con"].item()
            sums["hnet_quan"] += h_parts["quan"].item()
            sums["labeled_pairs"] += batch.n_pairs
            sums["no_pair_batches"] += int(h_parts["no_pair_batch"])
            n_batches += 1

        means = {key: sums[key] / max(n_batches, 1) for key in sums}
        means["labeled_pairs"] = sums["labeled_pairs"] / max(n_batches, 1)
        means["no_pair_batches"] = sums["no_pair_batches"]
        row = {"epoch": self.epoch, "omega": omega, "lr": lr, **means}
        self.epoch += 1
        return row

    def train(self, epochs=None):
        """Run to the configured epoch count; returns the list of epoch rows."""
        target = self.cfg.epochs if epochs is None else epochs
        rows = []
        while self.epoch < target:
            t0 = time.monotonic()
            row = self.train_epoch()
            rows.append(row)
            self._append_csv(row)
            if self.out_dir is not None:
                self.save_checkpoint(os.path.join(self.out_dir, "checkpoint.pt"))
            log.info("epoch %d done in %.2fs (hnet %.4f)",
                     row["epoch"], time.monotonic() - t0, row["hnet_total"])
        return rows

    # --- persistence ------------------------------------------------------------

    def _append_csv(self, row):
        if self.out_dir is None:
            return
        path = os.path.join(self.out_dir, "metrics.csv")
        fresh = not os.path.exists(path)
        with open(path, "a", newline="") as f:
            writer = csv.writer(f)
            if fresh:
                writer.writerow(CSV_COLUMNS)
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in CSV_COLUMNS])

    def save_checkpoint(self, path):
        from .config import train_config_to_dict

        state = {
            "config": train_config_to_dict(self.cfg),
            "epoch": self.epoch,
            "encoder": self.encoder.state_dict(),
            "generator": (self.generator.state_dict()
                          if self.generator is not None else None),
            "opt_encoder": self.opt_encoder.state_dict(),
            "opt_generator": (self.opt_generator.state_dict()
                              if self.opt_generator is not None else None),
            "torch_rng": torch.get_rng_state(),
            "batch_rng": self.batch_rng.bit_generator.state,
            "baseline_rng": self.baseline_rng.bit_generator.state,
        }
        buffer = io.BytesIO()
        torch.save(state, buffer)
        with open(path, "wb") as f:
            f.write(buffer.getvalue())

    @classmethod
    def from_checkpoint(cls, path, dataset, out_dir=None, cfg=None):
        """Rebuild a trainer mid-run; the continuation is bit-exact.

        Passing a config lets the run extend to a new epoch target; any
        other field differing from the checkpointed config is an error.
        """
        from .config import train_config_from_dict

        state = torch.load(path, weights_only=False)
        ckpt_cfg = train_config_from_dict(state["config"])
        if cfg is None:
            cfg = ckpt_cfg
        elif replace(cfg, epochs=ckpt_cfg.epochs) != ckpt_cfg:
            raise ConfigurationError(
                "resume config differs from the checkpoint config "
                "(only epochs may change)"
            )
        trainer = cls(cfg, dataset, out_dir=out_dir)
        trainer.epoch = state["epoch"]
        trainer.encoder.load_state_dict(state["encoder"])
        trainer.opt_encoder.load_state_dict(state["opt_encoder"])
        if trainer.generator is not None:
            trainer.generator.load_state_dict(state["generator"])
            trainer.opt_generator.load_state_dict(state["opt_generator"])
        torch.set_rng_state(state["torch_rng"])
        trainer.batch_rng.bit_generator.state = state["batch_rng"]
        trainer.baseline_rng.bit_generator.state = state["baseline_rng"]
        return trainer
