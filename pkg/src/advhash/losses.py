"""Training losses over batches of relaxed codes.

All losses are means over their index sets, so the loss weights stay
decoupled from batch size and band count. ``mu`` is the (B, k) tensor of
codes of the original images and ``mu_hard`` the (n_bands, B, k) tensor of
codes of their hard variants; pair arrays index positions within the batch.
"""

from dataclasses import dataclass

import torch

from .codes import binarize, pair_distance, similarity_degree


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights of the two training objectives; all nonnegative."""

    alpha: float = 0.5
    beta: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _check_omega(omega):
    if omega <= 0:
        raise ValueError("margin omega must be positive")


def adv_hinge(hard, d_orig, omega):
    """Hinge with the self-paced dynamic margin: max(omega*(1 - d) - hard, 0).

    The required hard degree shrinks for pairs the encoder already finds
    hard (d close to 1) and grows as it improves (d close to 0).
    """
    _check_omega(omega)
    return torch.clamp(omega * (1.0 - d_orig) - hard, min=0.0)


def fixed_paced_loss(hard, omega):
    """Static-margin hinge max(omega - hard, 0) used by the fixed-paced variant."""
    _check_omega(omega)
    return torch.clamp(omega - hard, min=0.0)


def _pair_gather(mu, mu_hard, pair_i, pair_j):
    """Per-pair code views: (P, k) originals and (n, P, k) hard variants."""
    return mu[pair_i], mu[pair_j], mu_hard[:, pair_i], mu_hard[:, pair_j]


def self_paced_loss(mu, mu_hard, pair_i, pair_j, pair_s, omega,
                    margin="self_paced"):
    """Mean hinge loss pushing generated pairs to be harder than originals.

    For each labeled pair and band, the generated-vs-generated hard degree
    is hinged at the full margin and the original-vs-generated (cross) hard
    degree, using the code of i against the generated code of j, at half
    margin. ``margin`` is "self_paced" (dynamic, scaled by 1 - d) or
    "fixed" (static). Returns 0 when the batch has no labeled pairs.
    """
    _check_omega(omega)
    if len(pair_i) == 0:
        return mu.sum() * 0.0
    mu_a, mu_b, hard_a, hard_b = _pair_gather(mu, mu_hard, pair_i, pair_j)
    d = pair_distance(pair_s, similarity_degree(mu_a, mu_b))
    d_gen = pair_distance(pair_s, similarity_degree(hard_a, hard_b))
    d_cross = pair_distance(pair_s, similarity_degree(mu_a.unsqueeze(0), hard_b))
    hard_gen = d_gen - d
    hard_cross = d_cross - d
    if margin == "self_paced":
        terms = (adv_hinge(hard_gen, d, omega)
                 + adv_hinge(hard_cross, d, omega / 2.0))
    elif margin == "fixed":
        terms = (fixed_paced_loss(hard_gen, omega)
                 + fixed_paced_loss(hard_cross, omega / 2.0))
    else:
        raise ValueError(f"unknown margin mode {margin!r}")
    return terms.mean()


def pairwise_semantic_term(mu_a, mu_b, s):
    """Squared gap between the similarity degree and the pairwise label."""
    if s is None:
        raise ValueError("pair label is unknown; filter unlabeled pairs first")
    return (similarity_degree(mu_a, mu_b) - s) ** 2


def semantic_loss(mu, mu_hard, pair_i, pair_j, pair_s):
    """Label-preservation loss: sum of the three pair-group means.

    Groups: original-original pairs, original-generated pairs, and
    generated-generated pairs (the latter two averaged over bands as well).
    With ``mu_hard`` None (no adversary) only the first group contributes.
    Returns 0 when the batch has no labeled pairs.
    """
    if len(pair_i) == 0:
        return mu.sum() * 0.0
    mu_a, mu_b = mu[pair_i], mu[pair_j]
    loss = pairwise_semantic_term(mu_a, mu_b, pair_s).mean()
    if mu_hard is not None:
        hard_a, hard_b = mu_hard[:, pair_i], mu_hard[:, pair_j]
        loss = loss + pairwise_semantic_term(mu_a.unsqueeze(0), hard_b, pair_s).mean()
        loss = loss + pairwise_semantic_term(hard_a, hard_b, pair_s).mean()
    return loss


def consistent_loss(mu, mu_hard):
    """Normalized disagreement between each image's code and its variants' codes.

    Mean over images and bands of (k - mu_hard . mu) / (2k), each term in
    [0, 1]; for sign codes the term equals Hamming distance / k. Applies to
    every image, labeled or not.
    """
    k = mu.shape[-1]
    return ((k - (mu_hard * mu.unsqueeze(0)).sum(-1)) / (2.0 * k)).mean()


def quantization_loss(mu, mu_hard=None):
    """L1 pull of relaxed codes toward their sign binarization.

    Mean over images of ||mu - sign(mu)||_1 plus, when hard variants are
    present, the mean over images and bands of the same for mu_hard. The
    sign targets are constants under differentiation.
    """
    loss = (mu - binarize(mu).detach()).abs().sum(-1).mean()
    if mu_hard is not None:
        loss = loss + (mu_hard - binarize(mu_hard).detach()).abs().sum(-1).mean()
    return loss


def anet_objective(mu, mu_hard, pair_i, pair_j, pair_s, weights, omega,
                   margin="self_paced"):
    """Generator objective: alpha*l_sp + lambda1*l_sem + beta*l_quan.

    Gradients are meant to flow into generator parameters only; the caller
    freezes the encoder. Returns the total plus unweighted components.
    """
    l_sp = self_paced_loss(mu, mu_hard, pair_i, pair_j, pair_s, omega, margin)
    l_sem = semantic_loss(mu, mu_hard, pair_i, pair_j, pair_s)
    l_quan = quantization_loss(mu, mu_hard)
    total = weights.alpha * l_sp + weights.lambda1 * l_sem + weights.beta * l_quan
    return {
        "total": total,
        "sp": l_sp,
        "sem": l_sem,
        "quan": l_quan,
        "n_pairs": len(pair_i),
        "no_pair_batch": len(pair_i) == 0,
    }


def hnet_objective(mu, mu_hard, pair_i, pair_j, pair_s, weights):
    """Encoder objective: lambda1*l_sem + lambda2*l_con + beta*l_quan.

    Hard variants are constants here (the caller detaches the generator
    outputs); the consistency term covers unlabeled images too. With
    ``mu_hard`` None the consistency term is dropped.
    """
    l_sem = semantic_loss(mu, mu_hard, pair_i, pair_j, pair_s)
    l_con = consistent_loss(mu, mu_hard) if mu_hard is not None else mu.sum() * 0.0
    l_quan = quantization_loss(mu, mu_hard)
    total = (weights.lambda1 * l_sem + weights.lambda2 * l_con
             + weights.beta * l_quan)
    return {
        "total": total,
        "sem": l_sem,
        "con": l_con,
        "quan": l_quan,
        "n_pairs": len(pair_i),
        "no_pair_batch": len(pair_i) == 0,
    }


def pair_tensors(batch, dtype=torch.float32):
    """Torch views of a PairBatch's pair arrays: (pair_i, pair_j, labels)."""
    return (
        torch.from_numpy(batch.pair_i),
        torch.from_numpy(batch.pair_j),
        torch.from_numpy(batch.pair_labels).to(dtype),
    )
