"""Morphology on hard label images: cells, solidity, and label editing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import ConvexHull, QhullError
from skimage.morphology import skeletonize

from .dataform import BACKGROUND, MEMBRANE, MITOCHONDRIA

CROSS = ndi.generate_binary_structure(2, 1)  # 4-connectivity, regions
SQUARE = ndi.generate_binary_structure(2, 2)  # 8-connectivity, skeletons
MITO_POLICIES = ("remove_concave", "hull_replace", "none")


@dataclass
class CellMask:
    mask: np.ndarray  # cell interior, cropped to bbox
    mito: np.ndarray  # mitochondria submask, same crop
    bbox: tuple[int, int, int, int]  # r0, c0, r1, c1 (exclusive)
    centroid: tuple[float, float]  # full-frame coordinates

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def mito_components(self) -> tuple[np.ndarray, int]:
        return ndi.label(self.mito, structure=CROSS)


@dataclass(frozen=True)
class EditPolicy:
    membrane_prune: bool = True
    mito_policy: str = "remove_concave"
    solidity_threshold: float = 0.9

    def __post_init__(self):
        if not 0 < self.solidity_threshold <= 1:
            raise ValueError(f"solidity threshold must lie in (0, 1], got {self.solidity_threshold}")
        if self.mito_policy not in MITO_POLICIES:
            raise ValueError(f"unknown mitochondria policy {self.mito_policy!r}")


def binarize(soft: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of an (H, W, 3) soft label; ties go to the lower class."""
    return np.argmax(np.asarray(soft), axis=-1).astype(np.uint8)


# -- convex hulls -------------------------------------------------------------

def hull_raster(mask: np.ndarray) -> np.ndarray:
    """Pixels whose centres fall inside (or on) the convex hull of the mask's pixel centres.

    A digitally convex mask is its own hull, so its solidity is exactly 1.
    """
    mask = np.asarray(mask, bool)
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return np.zeros_like(mask)
    r0, r1 = ys.min(), ys.max() + 1
    c0, c1 = xs.min(), xs.max() + 1
    yy, xx = np.mgrid[r0:r1, c0:c1]
    pts = np.column_stack([yy.ravel(), xx.ravel()]).astype(float)
    centres = np.column_stack([ys, xs]).astype(float)
    try:
        hull = ConvexHull(centres)
        # hull.equations rows: n . p + b <= 0 inside
        inside = np.all(pts @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-9, axis=1)
    except QhullError:  # a single pixel or a straight run: the hull is the segment
        d = centres[-1] - centres[0]
        rel = pts - centres[0]
        inside = np.abs(rel[:, 0] * d[1] - rel[:, 1] * d[0]) <= 1e-9
    out = np.zeros_like(mask)
    out[r0:r1, c0:c1] = inside.reshape(yy.shape)
    return out | mask


def solidity(mask: np.ndarray) -> float:
    mask = np.asarray(mask, bool)
    area = int(mask.sum())
    if area == 0:
        raise ValueError("solidity of an empty mask")
    return area / int(hull_raster(mask).sum())


# -- cells ------------------------------------------------------------------------

def _touches_border(lab, n):
    edge = np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]])
    touched = np.zeros(n + 1, bool)
    touched[edge] = True
    return touched


def cell_regions(label: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """4-connected non-membrane components and a mask of which touch the border."""
    lab, n = ndi.label(np.asarray(label) != MEMBRANE, structure=CROSS)
    return lab, _touches_border(lab, n)


def extract_cells(label: np.ndarray) -> list[CellMask]:
    """Cells fully enclosed by membrane, each with its mitochondria."""
    label = np.asarray(label)
    lab, touched = cell_regions(label)
    cells = []
    for i, sl in enumerate(ndi.find_objects(lab), start=1):
        if sl is None or touched[i]:
            continue
        mask = lab[sl] == i
        ys, xs = np.nonzero(mask)
        cells.append(CellMask(
            mask=mask,
            mito=mask & (label[sl] == MITOCHONDRIA),
            bbox=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop),
            centroid=(float(ys.mean() + sl[0].start), float(xs.mean() + sl[1].start)),
        ))
    return cells


# -- editing ----------------------------------------------------------------------

def _neighbour_count(skel):
    k = np.ones((3, 3), int)
    k[1, 1] = 0
    return ndi.convolve(skel.astype(int), k, mode="constant")


def prune_free_branches(skel: np.ndarray) -> np.ndarray:
    """Strip skeleton branches that end in a free endpoint (not on the image border).

    Endpoints are peeled one pixel at a time; the stub a branch leaves on the
    line it joined is thinned away before peeling again.
    """
    skel = np.asarray(skel, bool).copy()
    interior = np.zeros_like(skel)
    interior[1:-1, 1:-1] = True
    while True:
        ends = skel & interior & (_neighbour_count(skel) <= 1)
        if ends.any():
            skel &= ~ends
            continue
        thin = skeletonize(skel)
        if np.array_equal(thin, skel):
            return skel
        skel = thin


def _prune_membranes(label):
    membrane = label == MEMBRANE
    if not membrane.any():
        return label
    skel = skeletonize(membrane)
    kept = prune_free_branches(skel)
    pruned = skel & ~kept
    if not pruned.any():
        return label
    # a membrane pixel goes with the pruned branch when that branch is its nearest
    # skeleton and it lies outside the half-width of the nearest surviving wall
    d_pruned = ndi.distance_transform_edt(~pruned)
    if kept.any():
        d_kept, (iy, ix) = ndi.distance_transform_edt(~kept, return_indices=True)
        half_width = ndi.distance_transform_edt(membrane)[iy, ix] - 0.5
    else:
        d_kept = np.full(label.shape, np.inf)
        half_width = np.zeros(label.shape)
    drop = membrane & (d_pruned < d_kept) & (d_kept > half_width)
    out = label.copy()
    out[drop] = BACKGROUND
    return out


def _edit_mitochondria(label, policy: EditPolicy):
    if policy.mito_policy == "none":
        return label
    out = label.copy()
    comps, n = ndi.label(label == MITOCHONDRIA, structure=CROSS)
    if n == 0:
        return label
    cells, _ = cell_regions(label)
    for i, sl in enumerate(ndi.find_objects(comps), start=1):
        comp = comps == i
        if solidity(comp[sl]) >= policy.solidity_threshold:
            continue
        if policy.mito_policy == "remove_concave":
            out[comp] = BACKGROUND
        else:
            cell = np.isin(cells, np.unique(cells[comp]))
            grown = hull_raster(comp) & cell & (out != MEMBRANE)
            out[grown] = MITOCHONDRIA
    return out


def _edit_once(label, policy):
    if policy.membrane_prune:
        label = _prune_membranes(label)
    return _edit_mitochondria(label, policy)


def edit_labels(label: np.ndarray, policy: EditPolicy | None = None, max_rounds: int = 32) -> np.ndarray:
    """Prune dangling membranes and fix concave mitochondria, repeated to a fixpoint.

    Repeating until nothing changes makes the edit idempotent.
    """
    policy = policy or EditPolicy()
    cur = np.asarray(label, np.uint8)
    for _ in range(max_rounds):
        nxt = _edit_once(cur, policy)
        if np.array_equal(nxt, cur):
            return nxt
        cur = nxt
    return cur
