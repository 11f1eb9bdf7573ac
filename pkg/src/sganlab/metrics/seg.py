"""Segmentation accuracy (mean IU, NLL) and binarised-label IU."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..dataform import BACKGROUND, NUM_CLASSES
from ..objectives import cross_entropy_labels


@dataclass
class SegReport:
    mean_iu: float  # percent
    nll_mean: float
    nll_std: float
    per_class_iu: list
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {"mean_iu": self.mean_iu, "nll": {"mean": self.nll_mean, "std": self.nll_std},
                "per_class_iu": self.per_class_iu, "confusion": self.confusion.tolist()}


def confusion_matrix(truth, pred, n_class: int = NUM_CLASSES) -> np.ndarray:
    """Rows: true class, columns: predicted class."""
    truth = np.asarray(truth, np.int64).ravel()
    pred = np.asarray(pred, np.int64).ravel()
    return np.bincount(n_class * truth + pred, minlength=n_class ** 2).reshape(n_class, n_class)


def iu_from_confusion(conf: np.ndarray) -> np.ndarray:
    """Per-class TP / (TP + FP + FN); NaN for classes absent from both."""
    tp = np.diag(conf).astype(float)
    denom = conf.sum(0) + conf.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def torch_segmenter(module: torch.nn.Module):
    """Wrap an image -> soft-label network as a numpy (H,W) -> (H,W,3) callable."""
    param = next(module.parameters())

    def run(image):
        x = torch.as_tensor(np.asarray(image), dtype=param.dtype)[None, None]
        with torch.no_grad():
            return module(x)[0].permute(1, 2, 0).cpu().numpy()
    return run


def seg_eval(segmenter, pairs) -> SegReport:
    """Mean IU over classes (pixels pooled across pairs) and per-item NLL."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("seg_eval needs at least one (label, image) pair")
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), np.int64)
    nll = []
    for label, image in pairs:
        probs = np.asarray(segmenter(image))
        label = np.asarray(label)
        if probs.shape[:2] != label.shape:
            raise ValueError(f"segmenter output {probs.shape} does not match label {label.shape}")
        conf += confusion_matrix(label, np.argmax(probs, axis=-1))
        nll.append(cross_entropy_labels(label, probs))
    iu = iu_from_confusion(conf)
    nll = np.array(nll)
    return SegReport(
        mean_iu=100.0 * float(np.nanmean(iu)),
        nll_mean=float(nll.mean()),
        nll_std=float(nll.std(ddof=1)) if len(nll) > 1 else 0.0,
        per_class_iu=[None if np.isnan(v) else 100.0 * float(v) for v in iu],
        confusion=conf,
    )


def _foreground(label, downsample):
    fg = np.asarray(label) != BACKGROUND
    if downsample > 1:
        h, w = fg.shape
        h, w = h - h % downsample, w - w % downsample
        fg = fg[:h, :w].reshape(h // downsample, downsample, w // downsample, downsample).mean(axis=(1, 3)) >= 0.5
    return fg


def label_iu(a, b, downsample: int = 2) -> float:
    """IU of non-background masks after area downsampling (block mean >= 0.5)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"label shapes differ: {a.shape} vs {b.shape}")
    fa, fb = _foreground(a, downsample), _foreground(b, downsample)
    union = np.count_nonzero(fa | fb)
    return 1.0 if union == 0 else np.count_nonzero(fa & fb) / union


def pairwise_iu(labels, downsample: int = 2, chunk: int = 1024) -> np.ndarray:
    """Symmetric matrix of :func:`label_iu` over a batch, vectorised."""
    flat = np.stack([_foreground(l, downsample).ravel() for l in labels]).astype(np.float32)
    sizes = flat.sum(1)
    n = len(flat)
    out = np.empty((n, n), np.float64)
    for i in range(0, n, chunk):
        inter = flat[i:i + chunk] @ flat.T
        union = sizes[i:i + chunk, None] + sizes[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            out[i:i + chunk] = np.where(union > 0, inter / np.where(union > 0, union, 1), 1.0)
    return out
