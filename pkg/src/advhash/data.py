"""Datasets, semi-supervised splits, pair batches, and the synthetic benchmark.

A dataset is an immutable stack of images in [-1, 1] plus one class-id set
per image; an empty set marks the image as unlabeled. Splits are pure,
seeded functions of (dataset, spec) and can be persisted as JSON manifests.
"""

import csv
import json
import math
import os
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from PIL import Image

from .codes import DISSIMILAR, SIMILAR


class ConfigurationError(ValueError):
    """Raised when a split or run configuration cannot be satisfied."""


@dataclass(frozen=True)
class LabeledImage:
    """Single-image view: pixels (C, H, W) in [-1, 1] and its class-id set."""

    pixels: np.ndarray
    class_ids: frozenset

    @property
    def is_labeled(self):
        return len(self.class_ids) > 0


class ImageDataset:
    """Immutable image stack with per-image class-id sets.

    images: float32 array (N, C, H, W) with values in [-1, 1].
    class_ids: sequence of N frozensets of ints; empty set = unlabeled.
    """

    def __init__(self, images, class_ids):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) images, got {images.shape}")
        if len(class_ids) != images.shape[0]:
            raise ValueError("images and class_ids lengths differ")
        if images.size and (images.min() < -1.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [-1, 1]")
        self.images = images
        self.images.setflags(write=False)
        self.class_ids = tuple(frozenset(c) for c in class_ids)

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, i):
        return LabeledImage(self.images[i], self.class_ids[i])

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def labeled_mask(self):
        return np.array([len(c) > 0 for c in self.class_ids], dtype=bool)

    @property
    def classes(self):
        out = set()
        for c in self.class_ids:
            out |= c
        return frozenset(out)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[indices],
                            [self.class_ids[i] for i in indices])

    def hide_labels_except(self, labeled_indices):
        """Copy of the dataset with labels kept only on the given indices.

        Used to build the training view of a semi-supervised split: images
        outside the labeled subset keep their pixels but lose their labels.
        """
        keep = set(int(i) for i in labeled_indices)
        return ImageDataset(
            self.images,
            [c if i in keep else frozenset() for i, c in enumerate(self.class_ids)],
        )


def build_pair_label(a, b):
    """Pairwise label of two images: SIMILAR, DISSIMILAR, or None.

    None (unknown) if either image is unlabeled; otherwise SIMILAR iff the
    class-id sets intersect (multi-label rule), DISSIMILAR otherwise.
    """
    if not a.is_labeled or not b.is_labeled:
        return None
    return SIMILAR if a.class_ids & b.class_ids else DISSIMILAR


@dataclass(frozen=True)
class SplitSpec:
    """Parameters of the seeded semi-supervised / unseen-class splits."""

    labeled_per_class: int
    query_per_class: int
    seed: int
    unseen_fraction: float = 0.0

    def __post_init__(self):
        if self.labeled_per_class < 0 or self.query_per_class < 0:
            raise ConfigurationError("per-class counts must be nonnegative")
        if not (0.0 <= self.unseen_fraction < 1.0):
            raise ConfigurationError("unseen_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class SemiSplit:
    query: np.ndarray
    database: np.ndarray
    labeled_train: np.ndarray
    unlabeled_train: np.ndarray


@dataclass(frozen=True)
class UnseenSplit:
    train75: np.ndarray
    test75: np.ndarray
    train25: np.ndarray
    test25: np.ndarray
    known_classes: frozenset
    unseen_classes: frozenset


def _indices_by_class(dataset):
    """Per-class index lists for single-label images; unlabeled listed apart."""
    by_class = {}
    unlabeled = []
    for i, cids in enumerate(dataset.class_ids):
        if not cids:
            unlabeled.append(i)
            continue
        if len(cids) != 1:
            raise ConfigurationError(
                "per-class splitting requires single-label data"
            )
        by_class.setdefault(next(iter(cids)), []).append(i)
    return by_class, unlabeled


def split_semi_supervised(dataset, spec):
    """Seeded query/database split with a labeled subset of the database.

    Per class: ``query_per_class`` images become queries, the rest form the
    database; ``labeled_per_class`` database images keep their labels for
    training, the remainder are the unlabeled pool. Unlabeled input images
    go straight to the unlabeled pool.
    """
    by_class, unlabeled_input = _indices_by_class(dataset)
    rng = np.random.default_rng(spec.seed)
    query, database, labeled, unlabeled = [], [], list(unlabeled_input), []
    for cls in sorted(by_class):
        idx = np.array(by_class[cls], dtype=np.int64)
        need = spec.query_per_class + spec.labeled_per_class
        if len(idx) < need:
            raise ConfigurationError(
                f"class {cls} has {len(idx)} images, needs at least {need}"
            )
        perm = rng.permutation(len(idx))
        idx = idx[perm]
        query.extend(idx[: spec.query_per_class])
        rest = idx[spec.query_per_class:]
        database.extend(rest)
        labeled.extend(rest[: spec.labeled_per_class])
        unlabeled.extend(rest[spec.labeled_per_class:])
    database.extend(unlabeled_input)
    return SemiSplit(
        query=np.sort(np.array(query, dtype=np.int64)),
        database=np.sort(np.array(database, dtype=np.int64)),
        labeled_train=np.sort(np.array(labeled, dtype=np.int64)),
        unlabeled_train=np.sort(np.array(unlabeled, dtype=np.int64)),
    )


def split_unseen_classes(dataset, spec):
    """Partition classes into known/unseen sets and each class 50/50 train/test.

    floor((1 - unseen_fraction) * n_classes) classes are known. Training uses
    the known-class train half; queries are the unseen-class test half and
    the database is the unseen-class train half.
    """
    if spec.unseen_fraction <= 0.0:
        raise ConfigurationError("unseen split needs unseen_fraction > 0")
    by_class, _ = _indices_by_class(dataset)
    classes = sorted(by_class)
    if len(classes) < 4:
        raise ConfigurationError("unseen split needs at least 4 classes")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(classes))
    n_known = int(math.floor((1.0 - spec.unseen_fraction) * len(classes)))
    known = frozenset(classes[i] for i in order[:n_known])
    unseen = frozenset(classes[i] for i in order[n_known:])

    parts = {"train75": [], "test75": [], "train25": [], "test25": []}
    for cls in classes:
        idx = np.array(by_class[cls], dtype=np.int64)
        idx = idx[rng.permutation(len(idx))]
        n_train = (len(idx) + 1) // 2
        if cls in known:
            parts["train75"].extend(idx[:n_train])
            parts["test75"].extend(idx[n_train:])
        else:
            parts["train25"].extend(idx[:n_train])
            parts["test25"].extend(idx[n_train:])
    return UnseenSplit(
        train75=np.sort(np.array(parts["train75"], dtype=np.int64)),
        test75=np.sort(np.array(parts["test75"], dtype=np.int64)),
        train25=np.sort(np.array(parts["train25"], dtype=np.int64)),
        test25=np.sort(np.array(parts["test25"], dtype=np.int64)),
        known_classes=known,
        unseen_classes=unseen,
    )


@dataclass(frozen=True)
class PairBatch:
    """Mini-batch with all unordered labeled pairs enumerated.

    ``pair_i``/``pair_j`` are positions within ``indices`` (i < j),
    ``pair_labels`` the corresponding SIMILAR/DISSIMILAR values, and
    ``unlabeled_members`` the positions of unlabeled batch members.
    """

    indices: np.ndarray
    pair_i: np.ndarray
    pair_j: np.ndarray
    pair_labels: np.ndarray
    unlabeled_members: np.ndarray

    @property
    def n_pairs(self):
        return len(self.pair_i)


def assemble_batch(indices, dataset):
    """Enumerate all unordered labeled pairs of a mini-batch."""
    indices = np.asarray(indices, dtype=np.int64)
    labeled_pos = [p for p, i in enumerate(indices)
                   if dataset[i].is_labeled]
    unlabeled_pos = [p for p in range(len(indices)) if p not in set(labeled_pos)]
    pi, pj, labels = [], [], []
    for a, b in combinations(labeled_pos, 2):
        s = build_pair_label(dataset[indices[a]], dataset[indices[b]])
        pi.append(a)
        pj.append(b)
        labels.append(s)
    return PairBatch(
        indices=indices,
        pair_i=np.array(pi, dtype=np.int64),
        pair_j=np.array(pj, dtype=np.int64),
        pair_labels=np.array(labels, dtype=np.float64),
        unlabeled_members=np.array(unlabeled_pos, dtype=np.int64),
    )


# --- synthetic benchmark -------------------------------------------------

_SHAPES = ("disk", "ring", "cross", "square", "bars", "triangle",
           "checker", "diamond")
_PALETTE = (
    (0.95, 0.30, 0.25),
    (0.25, 0.90, 0.35),
    (0.30, 0.45, 0.95),
    (0.95, 0.85, 0.25),
    (0.90, 0.35, 0.90),
    (0.30, 0.90, 0.90),
)


def _shape_mask(kind, u, v, s):
    r = np.sqrt(u * u + v * v)
    if kind == "disk":
        return r <= s
    if kind == "ring":
        return (r <= s) & (r >= 0.55 * s)
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8 * s
    if kind == "cross":
        arm = 0.3 * s
        return ((np.abs(u) <= arm) & (np.abs(v) <= s)) | (
            (np.abs(v) <= arm) & (np.abs(u) <= s))
    if kind == "triangle":
        return (v > -0.75 * s) & (v < 0.75 * s) & (np.abs(u) < (0.75 * s - v) * 0.7)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= s
    if kind == "bars":
        box = np.maximum(np.abs(u), np.abs(v)) <= 0.85 * s
        return box & (np.sin(v / s * 9.0) > 0)
    if kind == "checker":
        return (r <= s) & (np.sin(u / s * 7.0) * np.sin(v / s * 7.0) > 0)
    raise ValueError(f"unknown shape kind {kind!r}")


def make_synthetic_dataset(n_classes, per_class, image_size, seed):
    """Render a class-separable geometric benchmark, deterministic per seed.

    Every third class shares its palette color with a neighbor (the shapes
    of a shared-color pair contrast strongly), so color alone does not
    identify all classes. Instances vary in position, scale, orientation,
    brightness, and pixel noise.
    """
    if image_size < 16:
        raise ConfigurationError("image_size must be at least 16")
    if n_classes > len(_SHAPES) * len(_PALETTE) // 2:
        raise ConfigurationError(
            f"at most {len(_SHAPES) * len(_PALETTE) // 2} synthetic classes"
        )
    rng = np.random.default_rng(seed)
    lin = np.linspace(-1.0, 1.0, image_size)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    images = np.empty((n_classes * per_class, 3, image_size, image_size),
                      dtype=np.float32)
    class_ids = []
    row = 0
    for cls in range(n_classes):
        kind = _SHAPES[cls % len(_SHAPES)]
        color = np.array(_PALETTE[((2 * cls + 1) // 3) % len(_PALETTE)])
        for _ in range(per_class):
            cx, cy = rng.uniform(-0.28, 0.28, size=2)
            scale = rng.uniform(0.42, 0.8)
            phi = rng.uniform(-np.pi / 4.5, np.pi / 4.5)
            cph, sph = np.cos(phi), np.sin(phi)
            u = cph * (xx - cx) + sph * (yy - cy)
            v = -sph * (xx - cx) + cph * (yy - cy)
            mask = _shape_mask(kind, u, v, scale)

            bg = rng.uniform(-0.9, -0.4)
            brightness = rng.uniform(-0.2, 0.2)
            fg = np.clip(color * 1.7 - 0.85 + brightness, -1.0, 1.0)
            img = np.where(mask[None, :, :], fg[:, None, None], bg)
            img = img + rng.normal(0.0, 0.2, size=img.shape)
            images[row] = np.clip(img, -1.0, 1.0)
            class_ids.append({cls})
            row += 1
    return ImageDataset(images, class_ids)


# --- persistence ----------------------------------------------------------

def save_split_manifest(path, spec, split):
    """Persist a split's index sets together with the spec that made them."""
    payload = {
        "spec": {
            "labeled_per_class": spec.labeled_per_class,
            "query_per_class": spec.query_per_class,
            "seed": spec.seed,
            "unseen_fraction": spec.unseen_fraction,
        },
        "sets": {
            name: [int(i) for i in getattr(split, name)]
            for name in split.__dataclass_fields__
            if isinstance(getattr(split, name), np.ndarray)
        },
    }
    if isinstance(split, UnseenSplit):
        payload["known_classes"] = sorted(split.known_classes)
        payload["unseen_classes"] = sorted(split.unseen_classes)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def load_split_manifest(path):
    with open(path) as f:
        payload = json.load(f)
    spec = SplitSpec(**payload["spec"])
    sets = {k: np.array(v, dtype=np.int64) for k, v in payload["sets"].items()}
    if "known_classes" in payload:
        return spec, UnseenSplit(
            known_classes=frozenset(payload["known_classes"]),
            unseen_classes=frozenset(payload["unseen_classes"]),
            **sets,
        )
    return spec, SemiSplit(**sets)


def save_image_folder(dataset, path):
    """Write a dataset as PNG files plus a labels.csv manifest."""
    os.makedirs(path, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        arr = dataset.images[i]
        px = np.clip((arr.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255)
        name = f"img_{i:06d}.png"
        Image.fromarray(px.round().astype(np.uint8)).save(os.path.join(path, name))
        rows.append((name, ";".join(str(c) for c in sorted(dataset.class_ids[i]))))
    with open(os.path.join(path, "labels.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "class_ids"])
        writer.writerows(rows)


def load_image_folder(path):
    """Load a dataset from a directory with PNGs and a labels.csv manifest.

    labels.csv columns: ``path`` (relative to the manifest) and ``class_ids``
    (``;``-separated integers, empty for unlabeled). Pixels are normalized
    to [-1, 1].
    """
    manifest = os.path.join(path, "labels.csv")
    images, class_ids = [], []
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["path", "class_ids"]:
            raise ConfigurationError(
                f"labels.csv must have columns path,class_ids; got {reader.fieldnames}"
            )
        for row in reader:
            img = Image.open(os.path.join(path, row["path"])).convert("RGB")
            arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1)
            images.append(arr / 127.5 - 1.0)
            raw = row["class_ids"].strip()
            class_ids.append({int(t) for t in raw.split(";")} if raw else set())
    if not images:
        raise ConfigurationError(f"no images listed in {manifest}")
    return ImageDataset(np.stack(images), class_ids)
