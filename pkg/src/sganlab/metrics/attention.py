"""Where a pair discriminator looks: input-gradient magnitude per channel."""
from __future__ import annotations

import numpy as np
import torch

from ..netspec import MultiScaleDiscriminator

CHANNELS = ("image", "background", "membrane", "mitochondria")


def _as_pair(label, image, dtype):
    label = torch.as_tensor(np.asarray(label) if not torch.is_tensor(label) else label)
    image = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    if label.ndim == 2:  # hard (H, W)
        label = torch.nn.functional.one_hot(label.long(), 3).permute(2, 0, 1)[None]
    elif label.ndim == 3:  # soft (H, W, 3)
        label = label.permute(2, 0, 1)[None]
    if image.ndim == 2:
        image = image[None, None]
    elif image.ndim == 3:
        image = image[:, None]
    return torch.cat([image.to(dtype), label.to(dtype)], dim=1)


def discriminator_score(discriminator, pair):
    """Scalar "real" score: weighted mean of patch logits for multi-scale D."""
    out = discriminator(pair)
    if isinstance(out, (list, tuple)):
        weights = (discriminator.spec.pyramid.weights if isinstance(discriminator, MultiScaleDiscriminator)
                   else [1.0 / len(out)] * len(out))
        return sum(w * o.mean() for w, o in zip(weights, out))
    return out.mean()


def gradient_attention(discriminator, label, image) -> dict:
    """Mean |d score / d input| over the membrane, mitochondria and image channels.

    ``label`` is hard (H,W), soft (H,W,3) or a tensor (N,3,H,W); ``image`` is
    (H,W) or (N,1,H,W).  The pair is assembled as (image, bg, membrane, mito).
    """
    try:
        dtype = next(discriminator.parameters()).dtype
    except (AttributeError, StopIteration):
        dtype = torch.float64
    pair = _as_pair(label, image, dtype).detach().requires_grad_(True)
    score = discriminator_score(discriminator, pair)
    (grad,) = torch.autograd.grad(score, pair, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(pair)
    mag = grad.abs().mean(dim=(0, 2, 3)).detach().cpu().numpy()
    return {"membrane": float(mag[2]), "mitochondria": float(mag[3]), "image": float(mag[0])}


def label_share(attn: dict) -> float:
    """Fraction of gradient mass on the label channels."""
    lab = attn["membrane"] + attn["mitochondria"]
    tot = lab + attn["image"]
    return lab / tot if tot > 0 else 0.0
