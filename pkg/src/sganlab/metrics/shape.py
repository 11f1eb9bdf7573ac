"""89-dimensional single-cell shape features and the real/fake SVM harness."""
from __future__ import annotations

import csv
import math
import os

import numpy as np
from scipy import ndimage as ndi
from skimage import measure

from ..labelops import CROSS, CellMask, hull_raster, solidity
from .stats import perimeter, roundness

ZERNIKE_ORDER = 12
ZERNIKE_INDICES = [(n, l) for n in range(ZERNIKE_ORDER + 1) for l in range(n + 1) if (n - l) % 2 == 0]
RADIAL_BINS = 10

FEATURE_NAMES = (
    [f"zernike_{n}_{l}" for n, l in ZERNIKE_INDICES]
    + ["morph_area", "morph_perimeter", "morph_eccentricity", "morph_solidity", "morph_extent",
       "morph_euler_number", "morph_major_axis", "morph_minor_axis"]
    + ["edge_boundary_fraction", "edge_curvature_mean", "edge_curvature_std",
       "edge_length_to_hull_perimeter", "edge_concavities"]
    + ["hull_solidity", "hull_convexity", "hull_eccentricity"]
    + ["mito_count", "mito_area_total", "mito_area_mean", "mito_area_std", "mito_area_max",
       "mito_area_min", "mito_roundness_mean", "mito_roundness_std", "mito_area_fraction",
       "mito_dispersion_radius", "mito_membrane_dist_mean", "mito_membrane_dist_std",
       "mito_pair_dist_mean", "mito_pair_dist_std"]
    + [f"mito_radial_{i}" for i in range(RADIAL_BINS)]
)
FEATURE_VERSION = 1
assert len(ZERNIKE_INDICES) == 49 and len(FEATURE_NAMES) == 89


def _radial_coeffs(n, l):
    return [((-1) ** s * math.factorial(n - s)
             / (math.factorial(s) * math.factorial((n + l) // 2 - s) * math.factorial((n - l) // 2 - s)),
             n - 2 * s)
            for s in range((n - l) // 2 + 1)]


def _polar(mask):
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    dy, dx = ys - cy, xs - cx
    r = np.hypot(dy, dx)
    radius = r.max() if r.max() > 0 else 1.0
    return r / radius, np.arctan2(dy, dx), radius


def zernike_moments(mask: np.ndarray, order: int = ZERNIKE_ORDER) -> np.ndarray:
    """Complex Zernike moments over the disk circumscribing the mask.

    The disk is centred on the centroid with radius equal to the largest
    centroid-to-pixel distance; each pixel contributes area 1/R^2, so the
    sums approximate integrals over the unit disk.
    """
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("Zernike moments of an empty mask")
    rho, theta, radius = _polar(mask)
    powers = {k: rho ** k for k in range(order + 1)}
    out = []
    for n, l in ((n, l) for n in range(order + 1) for l in range(n + 1) if (n - l) % 2 == 0):
        radial = sum(c * powers[k] for c, k in _radial_coeffs(n, l))
        out.append((n + 1) / np.pi * np.sum(radial * np.exp(-1j * l * theta)) / radius ** 2)
    return np.array(out)


def zernike_magnitudes(mask, order: int = ZERNIKE_ORDER) -> np.ndarray:
    return np.abs(zernike_moments(mask, order))


def _turning_angles(mask, step=3):
    contours = measure.find_contours(np.pad(mask, 1).astype(float), 0.5)
    if not contours:
        return np.zeros(1)
    c = max(contours, key=len)[::step]
    if len(c) < 4:
        return np.zeros(1)
    seg = np.diff(np.vstack([c, c[:1]]), axis=0)
    ang = np.arctan2(seg[:, 0], seg[:, 1])
    turn = np.diff(np.concatenate([ang, ang[:1]]))
    return (turn + np.pi) % (2 * np.pi) - np.pi


def _region(mask):
    return measure.regionprops(np.pad(mask, 1).astype(np.uint8))[0]


def shape_features(cell: CellMask, resolution=(4.6, 4.6)) -> np.ndarray:
    """89 features: Zernike (49), morphology (8), edge (5), hull (3), mitochondria (24)."""
    mask = np.asarray(cell.mask, bool)
    if not mask.any():
        raise ValueError("shape features of an empty cell mask")
    px = float(np.mean(resolution)) / 1000.0  # micrometres per pixel
    area_px = float(mask.sum())
    per_px = perimeter(mask)
    hull = hull_raster(mask)
    hull_per = perimeter(hull)
    props, hprops = _region(mask), _region(hull)
    sol = solidity(mask)

    zern = zernike_magnitudes(mask)
    morph = [area_px * px ** 2, per_px * px, props.eccentricity, sol, props.extent,
             props.euler_number, props.major_axis_length * px, props.minor_axis_length * px]

    boundary = mask & ~ndi.binary_erosion(mask, structure=CROSS, border_value=0)
    turns = _turning_angles(mask)
    defects, nd = ndi.label(hull & ~mask, structure=CROSS)
    n_concave = int(np.sum(np.bincount(defects.ravel())[1:] >= 2)) if nd else 0
    edge = [boundary.sum() / area_px, np.abs(turns).mean(), turns.std(),
            per_px / hull_per if hull_per > 0 else 1.0, n_concave]

    hullf = [sol, hull_per / per_px if per_px > 0 else 1.0, hprops.eccentricity]

    mito = _mito_features(cell, mask, px)
    vec = np.array(list(zern) + morph + edge + hullf + mito, dtype=np.float64)
    return np.nan_to_num(vec, nan=0.0, posinf=0.0, neginf=0.0)


def _mito_features(cell: CellMask, mask, px):
    comps, n = ndi.label(np.asarray(cell.mito, bool), structure=CROSS)
    feats = np.zeros(24)
    if n == 0:
        return list(feats)
    idx = np.arange(1, n + 1)
    areas = ndi.sum(np.ones_like(comps), comps, idx) * px ** 2
    cents = np.array(ndi.center_of_mass(np.ones_like(comps), comps, idx))
    rounds = np.array([roundness(comps == i) for i in idx])
    to_edge = ndi.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    mem_dist = np.array(ndi.mean(to_edge, comps, idx)) * px
    ys, xs = np.nonzero(mask)
    c = np.array([ys.mean(), xs.mean()])
    disp = np.sqrt(np.mean(np.sum((cents - cents.mean(0)) ** 2, axis=1))) * px
    if n > 1:
        dd = np.hypot(*(cents[:, None, :] - cents[None, :, :]).transpose(2, 0, 1))[np.triu_indices(n, 1)] * px
        pair_mean, pair_std = dd.mean(), dd.std()
    else:
        pair_mean = pair_std = 0.0
    cell_r = max(np.hypot(ys - c[0], xs - c[1]).max(), 1.0)
    my, mx = np.nonzero(comps)
    rr = np.hypot(my - c[0], mx - c[1]) / cell_r
    radial = np.histogram(np.clip(rr, 0, 1), bins=RADIAL_BINS, range=(0, 1))[0] / len(rr)
    head = [n, areas.sum(), areas.mean(), areas.std(), areas.max(), areas.min(),
            rounds.mean(), rounds.std(), areas.sum() / (mask.sum() * px ** 2), disp,
            mem_dist.mean(), mem_dist.std(), pair_mean, pair_std]
    return head + list(radial)


def fool_rate(real_feats, fake_feats, folds: int = 5, seed: int = 0, min_samples: int = 20) -> float:
    """Percent of held-out fake samples an RBF-SVM labels as real (cross-validated)."""
    from sklearn.model_selection import StratifiedKFold, cross_val_predict
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler
    from sklearn.svm import SVC

    real = np.atleast_2d(np.asarray(real_feats, float))
    fake = np.atleast_2d(np.asarray(fake_feats, float))
    if len(real) < min_samples or len(fake) < min_samples:
        raise ValueError(f"fool rate needs >= {min_samples} samples per class, got {len(real)}/{len(fake)}")
    X = np.vstack([real, fake])
    y = np.r_[np.ones(len(real), int), np.zeros(len(fake), int)]
    if np.ptp(X, axis=0).max() == 0:
        raise ValueError("degenerate features: every sample is identical")
    clf = make_pipeline(StandardScaler(), SVC(kernel="rbf", C=1.0, gamma="scale"))
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    pred = cross_val_predict(clf, X, y, cv=cv)
    return 100.0 * float(np.mean(pred[y == 0] == 1))


def export_features(vectors, path, tags=None) -> str:
    """CSV with the 89 feature names plus a ``source`` column."""
    vectors = [np.asarray(v, float) for v in vectors]
    if not vectors:
        raise ValueError("nothing to export")
    tags = list(tags) if tags is not None else [""] * len(vectors)
    if len(tags) != len(vectors):
        raise ValueError("one tag per vector")
    path = os.fspath(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FEATURE_NAMES + ["source"])
        for v, t in zip(vectors, tags):
            if v.shape != (89,):
                raise ValueError(f"feature vector must have 89 entries, got {v.shape}")
            w.writerow([repr(float(x)) for x in v] + [t])
    return path


def read_features(path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:-1] != FEATURE_NAMES:
        raise ValueError("unexpected feature header")
    return np.array([[float(x) for x in r[:-1]] for r in body]), [r[-1] for r in body]
