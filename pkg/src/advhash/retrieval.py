"""Hamming-ranking evaluation: mAP, precision@N, PR curves, unseen-class protocol.

Codes are stored bit-packed, 64 components per little-endian word, and
ranked by popcount distance. A per-bit path is kept alongside as the
reference the tests compare against. Ranking ties break by ascending
database index.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .data import ConfigurationError, split_unseen_classes

WORD_BITS = 64
_MAGIC = b"BHC1"


def pack_codes(bits):
    """Pack sign codes (N, k) of +-1 into (N, ceil(k/64)) uint64 words.

    Component c lands in word c // 64 at bit c % 64 (LSB first); a set bit
    means +1.
    """
    bits = np.asarray(bits)
    if bits.ndim != 2:
        raise ValueError(f"expected (N, k) codes, got shape {bits.shape}")
    positive = (bits > 0).astype(np.uint8)
    n, k = positive.shape
    words_per_row = (k + WORD_BITS - 1) // WORD_BITS
    padded = np.zeros((n, words_per_row * WORD_BITS), dtype=np.uint8)
    padded[:, :k] = positive
    packed_bytes = np.packbits(padded, axis=1, bitorder="little")
    return packed_bytes.view("<u8").reshape(n, words_per_row)


def unpack_codes(packed, k):
    """Inverse of pack_codes: uint64 words back to +-1 int8 codes (N, k)."""
    packed = np.ascontiguousarray(packed, dtype="<u8")
    bits = np.unpackbits(packed.view(np.uint8), axis=1, bitorder="little")[:, :k]
    return (bits.astype(np.int8) * 2 - 1)


def hamming_matrix(query_packed, db_packed):
    """Pairwise Hamming distances (Q, N) via XOR + popcount on packed words."""
    xored = query_packed[:, None, :] ^ db_packed[None, :, :]
    return np.bitwise_count(xored).sum(axis=2, dtype=np.int64)


def hamming_matrix_naive(query_bits, db_bits):
    """Per-bit reference path on +-1 codes; kept as the oracle for popcount."""
    q = np.asarray(query_bits)[:, None, :]
    d = np.asarray(db_bits)[None, :, :]
    return (q != d).sum(axis=2, dtype=np.int64)


def rank_database(query_packed, db_packed):
    """Database indices by ascending Hamming distance, ties by ascending index."""
    dist = hamming_matrix(query_packed.reshape(1, -1), db_packed)[0]
    return np.argsort(dist, kind="stable")


@dataclass(frozen=True)
class RetrievalRun:
    """Packed database/query codes with their class-id sets."""

    db_packed: np.ndarray
    db_labels: tuple
    query_packed: np.ndarray
    query_labels: tuple
    code_length: int

    def __post_init__(self):
        if len(self.db_packed) == 0 or len(self.query_packed) == 0:
            raise ConfigurationError("database and query sets must be nonempty")
        if self.db_packed.shape[1] != self.query_packed.shape[1]:
            raise ConfigurationError("database and query word widths differ")

    @classmethod
    def from_codes(cls, db_bits, db_labels, query_bits, query_labels):
        k = np.asarray(db_bits).shape[1]
        if np.asarray(query_bits).shape[1] != k:
            raise ConfigurationError("database and query code lengths differ")
        return cls(
            db_packed=pack_codes(db_bits),
            db_labels=tuple(frozenset(c) for c in db_labels),
            query_packed=pack_codes(query_bits),
            query_labels=tuple(frozenset(c) for c in query_labels),
            code_length=k,
        )


def relevance_matrix(run):
    """Boolean (Q, N): query and database item share at least one class id."""
    classes = sorted({c for s in run.db_labels for c in s}
                     | {c for s in run.query_labels for c in s})
    col = {c: i for i, c in enumerate(classes)}
    if not classes:
        return np.zeros((len(run.query_labels), len(run.db_labels)), dtype=bool)

    def onehot(labels):
        m = np.zeros((len(labels), len(classes)), dtype=np.int64)
        for r, s in enumerate(labels):
            for c in s:
                m[r, col[c]] = 1
        return m

    return (onehot(run.query_labels) @ onehot(run.db_labels).T) > 0


def average_precision(relevance, cutoff=None):
    """AP of a 0/1 relevance sequence in rank order, over the top ``cutoff``.

    Mean of precision-at-hit over the relevant hits within the cutoff;
    0.0 when the cutoff window contains no relevant item.
    """
    relevance = np.asarray(relevance, dtype=bool)
    if relevance.size == 0:
        raise ValueError("empty ranking")
    if cutoff is None:
        cutoff = len(relevance)
    if cutoff > len(relevance):
        raise ValueError("cutoff exceeds ranking length")
    top = relevance[:cutoff]
    hits = np.cumsum(top)
    n_rel = hits[-1] if len(hits) else 0
    if n_rel == 0:
        return 0.0
    ranks = np.arange(1, cutoff + 1)
    return float((hits[top] / ranks[top]).sum() / n_rel)


def _ranked_relevance(run):
    """Relevance of every database item per query, in ranked order (Q, N)."""
    dist = hamming_matrix(run.query_packed, run.db_packed)
    order = np.argsort(dist, axis=1, kind="stable")
    rel = relevance_matrix(run)
    return np.take_along_axis(rel, order, axis=1), dist


def mean_average_precision(run, cutoff=None):
    """Mean AP over queries; default cutoff is the full database."""
    ranked, _ = _ranked_relevance(run)
    return float(np.mean([average_precision(row, cutoff) for row in ranked]))


def precision_at_n(run, n):
    """Mean precision at each rank 1..n over all queries; array of length n."""
    ranked, _ = _ranked_relevance(run)
    if n > ranked.shape[1]:
        raise ValueError("n exceeds database size")
    hits = np.cumsum(ranked[:, :n], axis=1)
    return (hits / np.arange(1, n + 1)).mean(axis=0)


def pr_curve(run):
    """Precision/recall at every Hamming radius 0..k.

    At radius r the retrieved set is {distance <= r}. Precision at a radius
    averages over queries that retrieved at least one item; recall averages
    over all queries (queries without any relevant database item are
    skipped). Recall is non-decreasing in the radius by construction.
    """
    rel = relevance_matrix(run)
    dist = hamming_matrix(run.query_packed, run.db_packed)
    radii = np.arange(run.code_length + 1)
    precisions, recalls = [], []
    total_rel = rel.sum(axis=1)
    has_rel = total_rel > 0
    for r in radii:
        retrieved = dist <= r
        n_ret = retrieved.sum(axis=1)
        hits = (retrieved & rel).sum(axis=1)
        with np.errstate(invalid="ignore"):
            p = np.where(n_ret > 0, hits / np.maximum(n_ret, 1), np.nan)
        precisions.append(float(np.nanmean(p)) if np.any(n_ret > 0) else 1.0)
        recalls.append(float((hits[has_rel] / total_rel[has_rel]).mean())
                       if has_rel.any() else 0.0)
    return {
        "radius": radii.tolist(),
        "precision": precisions,
        "recall": recalls,
    }


def evaluate(run, cutoffs=(None,), top_n=None):
    """Metrics bundle for one run, JSON-serializable."""
    if top_n is None:
        top_n = min(100, len(run.db_labels))
    maps = {}
    for cutoff in cutoffs:
        key = "full" if cutoff is None else str(int(cutoff))
        maps[key] = mean_average_precision(run, cutoff)
    return {
        "code_length": run.code_length,
        "n_queries": len(run.query_labels),
        "n_database": len(run.db_labels),
        "map": maps,
        "precision_at_n": precision_at_n(run, top_n).tolist(),
        "pr_curve": pr_curve(run),
    }


# --- code dump format ------------------------------------------------------
#
# <path>:             magic "BHC1" | uint32 LE k | uint64 LE count |
#                     count rows of ceil(k/64) uint64 LE words
# <path>.labels.json: {"k", "count", "labels": [[class ids], ...]}

def save_codes(path, bits, labels):
    """Write packed codes plus a JSON label sidecar."""
    bits = np.asarray(bits)
    packed = pack_codes(bits)
    n, k = bits.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", k))
        f.write(struct.pack("<Q", n))
        f.write(packed.astype("<u8").tobytes())
    with open(f"{path}.labels.json", "w") as f:
        json.dump(
            {"k": k, "count": n, "labels": [sorted(s) for s in labels]},
            f, sort_keys=True,
        )


def load_codes(path):
    """Read a code dump; returns (+-1 int8 codes, label sets)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ConfigurationError(f"bad magic {magic!r} in {path}")
        k = struct.unpack("<I", f.read(4))[0]
        n = struct.unpack("<Q", f.read(8))[0]
        words_per_row = (k + WORD_BITS - 1) // WORD_BITS
        raw = f.read(n * words_per_row * 8)
    packed = np.frombuffer(raw, dtype="<u8").reshape(n, words_per_row)
    with open(f"{path}.labels.json") as f:
        sidecar = json.load(f)
    if sidecar["k"] != k or sidecar["count"] != n:
        raise ConfigurationError("label sidecar does not match code dump header")
    labels = tuple(frozenset(s) for s in sidecar["labels"])
    return unpack_codes(packed, k), labels


# --- unseen-class protocol ---------------------------------------------------

def evaluate_unseen(train_fn, dataset, spec, n_splits=5, cutoff=None):
    """Train/evaluate on disjoint class sets over several seeded splits.

    For each split, classes partition into known and unseen sets and each
    class's images split in half. ``train_fn(train_dataset) -> encoder`` is
    called on the known-class train half; the unseen-class test half forms
    the queries and the unseen-class train half the database. Returns per
    split mAP plus mean and standard deviation.
    """
    from .encoder import encode_dataset

    per_split = []
    split_meta = []
    for s in range(n_splits):
        split_spec = type(spec)(
            labeled_per_class=spec.labeled_per_class,
            query_per_class=spec.query_per_class,
            seed=spec.seed + s,
            unseen_fraction=spec.unseen_fraction,
        )
        split = split_unseen_classes(dataset, split_spec)
        train_ds = dataset.subset(split.train75)
        if train_ds.classes & split.unseen_classes:
            raise AssertionError("unseen classes leaked into the training set")
        encoder = train_fn(train_ds)
        db_bits = encode_dataset(encoder, dataset, split.train25)
        q_bits = encode_dataset(encoder, dataset, split.test25)
        run = RetrievalRun.from_codes(
            db_bits, [dataset.class_ids[i] for i in split.train25],
            q_bits, [dataset.class_ids[i] for i in split.test25],
        )
        per_split.append(mean_average_precision(run, cutoff))
        split_meta.append({
            "seed": split_spec.seed,
            "known_classes": sorted(split.known_classes),
            "unseen_classes": sorted(split.unseen_classes),
        })
    arr = np.array(per_split)
    return {
        "map_per_split": per_split,
        "map_mean": float(arr.mean()),
        "map_std": float(arr.std()),
        "splits": split_meta,
    }
