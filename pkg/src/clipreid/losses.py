"""Losses for both training stages.

Every function is a pure torch function returning a scalar tensor; batch
reductions are means.
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError

DEFAULT_EPSILON = 0.1
DEFAULT_MARGIN = 0.3
STAGE2_WEIGHTS = {"vit": (0.25, 1.0, 1.0), "cnn": (1.0, 1.0, 1.0)}


def _square(S):
    if S.dim() != 2 or S.shape[0] != S.shape[1]:
        raise ContractError(f"expected a square similarity matrix, got {tuple(S.shape)}")


def loss_i2t(S: torch.Tensor) -> torch.Tensor:
    """Image-to-text contrastive loss; ``S[i, a] = s(V_i, T_a)`` with matches on the diagonal."""
    _square(S)
    return -torch.log_softmax(S, dim=1).diagonal().mean()


def loss_t2i(S: torch.Tensor) -> torch.Tensor:
    """Text-to-image contrastive loss: softmax runs down each column."""
    _square(S)
    return -torch.log_softmax(S, dim=0).diagonal().mean()


def loss_t2i_multipos(S: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Text-to-image loss where a text anchor may have several positive images.

    ``S[a, j] = s(V_a, T_{y_j})``, so every column ``j`` with label ``y`` is the
    anchor column for ``T_y``. Per distinct ``y`` the positive mass
    ``sum_{p in P(y)} exp(S[p, y])`` sits inside the log; the outer average over
    ``P(y)`` repeats one p-independent term and is kept only as an identity.
    The result is the mean over the distinct labels of the batch.
    """
    _square(S)
    labels = torch.as_tensor(labels).reshape(-1)
    if labels.numel() != S.shape[0]:
        raise ContractError("labels must have one entry per batch row")
    uniq, first = _first_occurrence(labels)
    terms = []
    for y, j in zip(uniq.tolist(), first.tolist()):
        pos = labels == y
        if not pos.any():
            raise ContractError(f"label {y} has no positive in the batch")
        col = S[:, j]
        term = torch.logsumexp(col[pos], 0) - torch.logsumexp(col, 0)
        terms.append(-(term.expand(int(pos.sum())).mean()))
    return torch.stack(terms).mean()


def _first_occurrence(labels):
    seen = {}
    for j, y in enumerate(labels.tolist()):
        seen.setdefault(y, j)
    ys = torch.tensor(list(seen.keys()), dtype=torch.long)
    js = torch.tensor(list(seen.values()), dtype=torch.long)
    return ys, js


def smoothed_target(y, n_classes: int, epsilon: float = DEFAULT_EPSILON,
                    dtype=torch.float64) -> torch.Tensor:
    """``q_k = (1 - eps) * [k == y] + eps / N`` for a scalar or a batch of labels."""
    if not 0 <= epsilon < 1:
        raise ConfigError(f"label smoothing epsilon must lie in [0, 1), got {epsilon}")
    y = torch.as_tensor(y, dtype=torch.long)
    q = F.one_hot(y, n_classes).to(dtype) * (1 - epsilon)
    return q + epsilon / n_classes


def _smoothed_ce(scores, targets, epsilon):
    single = scores.dim() == 1
    if single:
        scores = scores.unsqueeze(0)
    n = scores.shape[1]
    if n < 2:
        raise ContractError("need at least two classes")
    q = smoothed_target(torch.as_tensor(targets).reshape(-1), n, epsilon, dtype=scores.dtype)
    return (-q * torch.log_softmax(scores, dim=1)).sum(1).mean()


def loss_id(scores: torch.Tensor, targets, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Label-smoothed ID cross-entropy on raw classifier scores (``N`` or ``B x N``)."""
    return _smoothed_ce(scores, targets, epsilon)


def loss_i2tce(S: torch.Tensor, targets, n_ids: int,
               epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Image-to-text cross-entropy against all ``n_ids`` cached text features.

    ``S`` holds ``s(V_i, T_k)`` for every training identity ``k`` (one row per image).
    """
    if S.shape[-1] != n_ids:
        raise ContractError(f"similarity row has {S.shape[-1]} entries, expected {n_ids}")
    return _smoothed_ce(S, targets, epsilon)


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    sq = (x.unsqueeze(1) - x.unsqueeze(0)).pow(2).sum(-1)
    return sq.clamp_min(1e-12).sqrt()


def loss_triplet(features: torch.Tensor, ids, margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Batch-hard triplet loss on raw (unnormalized) features."""
    ids = torch.as_tensor(ids).reshape(-1)
    B = features.shape[0]
    if ids.numel() != B:
        raise ContractError("ids must have one entry per feature row")
    dist = pairwise_euclidean(features)
    same = ids.unsqueeze(0) == ids.unsqueeze(1)
    eye = torch.eye(B, dtype=torch.bool)
    pos = same & ~eye
    neg = ~same
    if not bool(pos.any(1).all()) or not bool(neg.any(1).all()):
        raise ContractError("every anchor needs a positive and a negative in the batch")
    d_p = dist.masked_fill(~pos, float("-inf")).max(1).values
    d_n = dist.masked_fill(~neg, float("inf")).min(1).values
    return triplet_margin(d_p, d_n, margin).mean()


def triplet_margin(d_p, d_n, margin: float = DEFAULT_MARGIN):
    return torch.clamp(torch.as_tensor(d_p) - torch.as_tensor(d_n) + margin, min=0)


def loss_stage1(S: torch.Tensor, labels) -> torch.Tensor:
    """Prompt-fitting objective: ``L_i2t + L_t2i`` (multi-positive form)."""
    return loss_i2t(S) + loss_t2i_multipos(S, labels)


def loss_stage2(id_term, tri_term, i2tce_term, weights: Sequence[float] = (0.25, 1.0, 1.0)):
    w_id, w_tri, w_i2tce = weights
    if min(weights) < 0:
        raise ConfigError("loss weights must be non-negative")
    return w_id * id_term + w_tri * tri_term + w_i2tce * i2tce_term


def loss_t2ice_averaged(S: torch.Tensor, targets) -> torch.Tensor:
    """Text-to-image cross-entropy against per-identity mean image features.

    ``S[a, j] = s(V_mean_a, T_j)``: for text ``j`` with identity ``targets[j]`` the
    softmax runs over all ``N`` averaged image features (rows). A 1-d ``S`` is a
    single column.
    """
    if S.dim() == 1:
        S = S.unsqueeze(1)
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    if targets.numel() != S.shape[1]:
        raise ContractError("one target per similarity column required")
    if int(targets.max()) >= S.shape[0] or int(targets.min()) < 0:
        raise ContractError("target outside the averaged-feature range")
    logp = torch.log_softmax(S, dim=0)
    return -logp[targets, torch.arange(S.shape[1])].mean()
