"""Visual-linguistic contrasting: cosine logits against social-prompt embeddings, and the loss."""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import ZeroNormError


def classify_logits(pair_feature: torch.Tensor, prompt_embeds: torch.Tensor, logit_scale: float = 1.0) -> torch.Tensor:
    """``z_c = logit_scale * cos(U, T_c)``.

    Accepts ``U [d]`` with ``T [C, d]``, or batched ``U [P, d]`` with ``T [C, d]`` or ``[P, C, d]``.
    """

    u_norm = pair_feature.norm(dim=-1, keepdim=True)
    t_norm = prompt_embeds.norm(dim=-1, keepdim=True)
    if bool((u_norm == 0).any()):
        raise ZeroNormError("pair feature has zero norm")
    if bool((t_norm == 0).any()):
        raise ZeroNormError("prompt embedding has zero norm")
    u = pair_feature / u_norm
    t = prompt_embeds / t_norm
    if u.dim() == 1:
        return logit_scale * (t @ u)
    if t.dim() == 2:
        return logit_scale * (u @ t.T)
    return logit_scale * torch.einsum("pd,pcd->pc", u, t)


def contrastive_loss(
    logits: torch.Tensor, labels: torch.Tensor, class_weights: Optional[Sequence[float]] = None
) -> torch.Tensor:
    """Mean cross-entropy of softmax(logits) at the labels; optional per-class weights."""

    if logits.dim() == 1:
        logits = logits[None]
        labels = labels.reshape(1)
    weight = None
    if class_weights is not None:
        weight = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
    return F.cross_entropy(logits, labels, weight=weight)
