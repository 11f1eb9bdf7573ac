"""Global statistics of many cells and chi-squared histogram distances."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi
from skimage.measure import perimeter_crofton

from ..dataform import DEFAULT_RESOLUTION, MITOCHONDRIA
from ..labelops import CROSS, extract_cells

DEFAULT_BINS = 20
STAT_COLUMNS = ("cell_size", "mito_size", "mito_roundness")


def perimeter(mask: np.ndarray) -> float:
    """Crofton perimeter estimate (4 directions) in pixels."""
    mask = np.pad(np.asarray(mask, bool), 1)
    return float(perimeter_crofton(mask, directions=4))


def roundness(mask: np.ndarray) -> float:
    """4*pi*area / perimeter**2, capped at 1."""
    mask = np.asarray(mask, bool)
    area = float(mask.sum())
    if area == 0:
        raise ValueError("roundness of an empty mask")
    p = perimeter(mask)
    return 1.0 if p == 0 else float(min(4 * np.pi * area / p ** 2, 1.0))


@dataclass
class GlobalStats:
    cell_sizes: np.ndarray  # um^2
    mito_sizes: np.ndarray  # um^2
    mito_roundness: np.ndarray
    n_cells: int
    n_mito: int
    edges: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.n_cells == 0

    @property
    def avg_cell_size(self) -> float:
        return float(self.cell_sizes.mean()) if self.n_cells else float("nan")

    @property
    def avg_mito_size(self) -> float:
        return float(self.mito_sizes.mean()) if self.n_mito else float("nan")

    @property
    def avg_mito_roundness(self) -> float:
        return float(self.mito_roundness.mean()) if self.n_mito else float("nan")

    @property
    def avg_mito_per_cell(self) -> float:
        return self.n_mito / self.n_cells if self.n_cells else float("nan")

    def values(self, column: str) -> np.ndarray:
        return {"cell_size": self.cell_sizes, "mito_size": self.mito_sizes,
                "mito_roundness": self.mito_roundness}[column]

    def histogram(self, column: str, edges=None) -> tuple[np.ndarray, np.ndarray]:
        """Normalised histogram; values outside ``edges`` fall in the end bins."""
        edges = self.edges.get(column) if edges is None else edges
        if edges is None:
            edges = histogram_edges(self.values(column))
        v = self.values(column)
        if len(v) == 0:
            return np.zeros(len(edges) - 1), edges
        counts = np.histogram(np.clip(v, edges[0], edges[-1]), bins=edges)[0].astype(float)
        return counts / counts.sum(), edges

    def summary(self) -> dict:
        return {"avg_cell_size_um2": self.avg_cell_size, "avg_mito_size_um2": self.avg_mito_size,
                "avg_mito_roundness": self.avg_mito_roundness,
                "avg_mito_per_cell": self.avg_mito_per_cell,
                "n_cells": self.n_cells, "n_mito": self.n_mito, "empty": self.empty}


def histogram_edges(values, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Equal-width bins spanning the 0th-100th percentile of ``values``."""
    v = np.asarray(values, float)
    if len(v) == 0:
        return np.linspace(0.0, 1.0, bins + 1)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        hi = lo + max(abs(lo), 1.0) * 1e-6
    return np.linspace(lo, hi, bins + 1)


def global_stats(labels, resolution=DEFAULT_RESOLUTION, bins: int = DEFAULT_BINS) -> GlobalStats:
    """Cell sizes, mitochondria sizes and roundness over enclosed cells of every label."""
    px2 = float(resolution[0]) * float(resolution[1]) / 1e6  # um^2 per pixel
    cells, mitos, rounds = [], [], []
    for label in labels:
        for cell in extract_cells(np.asarray(label)):
            cells.append(cell.area * px2)
            comps, n = ndi.label(cell.mito, structure=CROSS)
            for i in range(1, n + 1):
                comp = comps == i
                mitos.append(comp.sum() * px2)
                rounds.append(roundness(comp))
    st = GlobalStats(np.array(cells), np.array(mitos), np.array(rounds), len(cells), len(mitos))
    st.edges = {c: histogram_edges(st.values(c), bins) for c in STAT_COLUMNS}
    return st


def chi_squared(h1, h2, edges1=None, edges2=None) -> float:
    """Halved chi-squared distance of two normalised histograms, in [0, 1]."""
    h1, h2 = np.asarray(h1, float), np.asarray(h2, float)
    if h1.shape != h2.shape:
        raise ValueError(f"histograms have different bins: {h1.shape} vs {h2.shape}")
    if edges1 is not None and edges2 is not None and not np.allclose(edges1, edges2):
        raise ValueError("histograms use different bin edges")
    tot = h1 + h2
    live = tot > 0
    return float(0.5 * np.sum((h1[live] - h2[live]) ** 2 / tot[live]))


def chi_squared_table(reference: GlobalStats, other: GlobalStats) -> dict:
    """Chi-squared distances per distribution, binned on the reference's edges.

    A distribution empty on exactly one side scores the maximum distance 1.
    """
    out = {}
    for col in STAT_COLUMNS:
        edges = reference.edges[col]
        a, _ = reference.histogram(col, edges)
        b, _ = other.histogram(col, edges)
        if (a.sum() == 0) != (b.sum() == 0):
            out[col] = 1.0
        else:
            out[col] = chi_squared(a, b)
    return out


def mito_pixels(labels) -> int:
    return int(sum(np.count_nonzero(np.asarray(l) == MITOCHONDRIA) for l in labels))
