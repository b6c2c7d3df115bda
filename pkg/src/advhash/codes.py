"""Code-space algebra: similarity degree, pair distance, hard degree, binarization.

Every function operates on the last axis and accepts torch tensors or numpy
arrays, so the same formulas serve the training losses (autograd path) and
the retrieval evaluator (numpy path).
"""

import numpy as np
import torch

# Pairwise labels. ``None`` marks an unknown pair (at least one endpoint is
# unlabeled); unknown pairs must be filtered out before distance computations.
SIMILAR = 1
DISSIMILAR = 0


def _check_same_length(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(
            f"code length mismatch: {a.shape[-1]} vs {b.shape[-1]}"
        )


def similarity_degree(mu_i, mu_j):
    """Estimated similarity of two relaxed codes, in [0, 1].

    Computes (mu_i . mu_j + k) / (2k) over the last axis. Identical codes of
    unit magnitude give 1.0, antipodal codes give 0.0.
    """
    _check_same_length(mu_i, mu_j)
    k = mu_i.shape[-1]
    return ((mu_i * mu_j).sum(-1) + k) / (2.0 * k)


def pair_distance(s, sim):
    """Discrepancy between a pairwise label and a similarity degree.

    ``s - (2s - 1) * sim``: equals 1 - sim for similar pairs (s=1) and sim
    for dissimilar pairs (s=0). Result lies in [0, 1] for sim in [0, 1].
    Unknown labels (None) are rejected; callers filter unlabeled pairs.
    """
    if s is None:
        raise ValueError("pair label is unknown; filter unlabeled pairs first")
    return s - (2.0 * s - 1.0) * sim


def hard_degree(d_orig, d_hard):
    """How much harder the generated pair is than the original: d_hard - d_orig.

    Positive means the generated codes violate the pairwise label more than
    the original codes did. Antisymmetric in its arguments, zero when equal.
    """
    return d_hard - d_orig


def binarize(mu):
    """Componentwise sign with the zero tie broken to +1."""
    if isinstance(mu, torch.Tensor):
        return torch.where(mu >= 0, 1.0, -1.0).to(mu.dtype)
    mu = np.asarray(mu)
    return np.where(mu >= 0, 1, -1).astype(mu.dtype)


def hamming_distance(b_i, b_j):
    """Number of differing positions between two sign codes: (k - b_i . b_j) / 2."""
    _check_same_length(b_i, b_j)
    k = b_i.shape[-1]
    dot = (b_i * b_j).sum(-1)
    half = (k - dot) / 2
    if isinstance(half, torch.Tensor):
        return half.round().long()
    return np.asarray(np.rint(half)).astype(np.int64)
