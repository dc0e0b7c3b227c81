"""Training objectives: pixel-to-prototype InfoNCE, weighted focal, Lovasz-softmax."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .pointcloud_io import UNLABELLED
from .prototype_bank import PrototypeBank


@dataclass(frozen=True)
class LossWeights:
    lambda_foc: float = 1.0
    lambda_lov: float = 1.0
    lambda_nce: float = 0.1
    temperature: float = 0.1
    gamma: float = 2.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


def info_nce_pix2proto(
    anchors: torch.Tensor,
    anchor_classes: torch.Tensor,
    bank: PrototypeBank | torch.Tensor,
    temperature: float = 0.1,
) -> torch.Tensor:
    """InfoNCE of anchors against every prototype in the bank.

    Positives are all prototypes of the anchor's class, negatives all the
    others. Returns the mean over anchors; an empty anchor set gives 0.
    Prototypes are treated as constants.
    """
    if isinstance(bank, PrototypeBank):
        protos, initialized = bank.protos, bank.initialized
    else:
        protos, initialized = bank, None
    if anchors.shape[0] == 0:
        return anchors.sum() * 0.0
    anchor_classes = anchor_classes.to(torch.long)
    if initialized is not None:
        bad = ~initialized[anchor_classes]
        if bad.any():
            missing = sorted(set(anchor_classes[bad].tolist()))
            raise ValueError(f"prototype classes {missing} are not initialised")
    K, n_p, D = protos.shape
    keys = protos.detach().to(anchors.dtype).reshape(K * n_p, D)
    logits = anchors @ keys.T / temperature
    key_class = torch.arange(K, device=anchors.device).repeat_interleave(n_p)
    pos = key_class[None, :] == anchor_classes[:, None]
    pos_lse = torch.logsumexp(logits.masked_fill(~pos, float("-inf")), dim=1)
    all_lse = torch.logsumexp(logits, dim=1)
    return (all_lse - pos_lse).mean()


def _flatten_labelled(scores: torch.Tensor, labels: torch.Tensor):
    """(B, K, H, W) + (B, H, W) -> (P, K) + (P,) over labelled pixels. Also accepts (N, K) + (N,)."""
    if scores.dim() == 4:
        K = scores.shape[1]
        scores = scores.permute(0, 2, 3, 1).reshape(-1, K)
        labels = labels.reshape(-1)
    keep = labels != UNLABELLED
    return scores[keep], labels[keep].to(torch.long)


def focal_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    weights: torch.Tensor | None = None,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Mean over labelled pixels of ``-w_y (1 - f_y)^gamma ln f_y``."""
    flat, y = _flatten_labelled(logits, labels)
    if y.numel() == 0:
        return logits.sum() * 0.0
    logp = F.log_softmax(flat, dim=1).gather(1, y[:, None])[:, 0]
    p = logp.exp()
    loss = -((1.0 - p) ** gamma if gamma else torch.ones_like(p)) * logp
    if weights is not None:
        loss = loss * torch.as_tensor(weights, dtype=loss.dtype)[y]
    return loss.mean()


def lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    p = gt_sorted.numel()
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1.0 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if p > 1:
        jaccard[1:p] = jaccard[1:p] - jaccard[0:-1]
    return jaccard


def lovasz_softmax_flat(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Lovasz-softmax over ``(P, K)`` probabilities, averaged over classes present in ``labels``."""
    if labels.numel() == 0:
        return probs.sum() * 0.0
    losses = []
    for c in torch.unique(labels).tolist():
        fg = (labels == c).to(probs.dtype)
        errors = (fg - probs[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True)
        losses.append(torch.dot(errors_sorted, lovasz_grad(fg[perm])))
    return torch.stack(losses).mean()


def lovasz_softmax(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Lovasz-softmax on labelled pixels, per frame, averaged over frames with labels.

    ``probs`` is ``(B, K, H, W)`` softmax output (or ``(P, K)`` for one frame).
    """
    if probs.dim() == 2:
        flat, y = _flatten_labelled(probs, labels)
        return lovasz_softmax_flat(flat, y)
    per_frame = []
    for b in range(probs.shape[0]):
        flat, y = _flatten_labelled(probs[b : b + 1], labels[b : b + 1])
        if y.numel():
            per_frame.append(lovasz_softmax_flat(flat, y))
    if not per_frame:
        return probs.sum() * 0.0
    return torch.stack(per_frame).mean()


def total_loss(foc, lov, nce, w: LossWeights = LossWeights()):
    return w.lambda_foc * foc + w.lambda_lov * lov + w.lambda_nce * nce
