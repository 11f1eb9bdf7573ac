"""Section stacks of paired EM images and label images.

Images are float32 arrays in [-1, 1]; hard labels are uint8 arrays with
0 = background, 1 = membrane, 2 = mitochondria.  Soft labels are H x W x 3
per-pixel class probabilities.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import cKDTree
from scipy.stats import qmc

logger = logging.getLogger(__name__)

BACKGROUND, MEMBRANE, MITOCHONDRIA = 0, 1, 2
NUM_CLASSES = 3
DEFAULT_RESOLUTION = (4.6, 4.6)
MANIFEST = "dataset.json"

_CROSS = ndi.generate_binary_structure(2, 1)


class IngestionError(Exception):
    """A dataset directory is missing files the manifest promises."""


class StructureError(Exception):
    """Images and labels disagree in shape or labels hold unknown classes."""


class SplitError(ValueError):
    pass


class PatchSpecError(ValueError):
    pass


class CorpusError(RuntimeError):
    pass


@dataclass
class SectionStack:
    """Ordered (image, label) sections sharing one frame size."""

    images: np.ndarray  # (N, H, W) float32 in [-1, 1]
    labels: np.ndarray  # (N, H, W) uint8 in {0, 1, 2}
    resolution: tuple[float, float] = DEFAULT_RESOLUTION
    source: str = ""
    indices: list[int] = field(default_factory=list)
    truth: dict | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 3 or self.images.shape != self.labels.shape:
            raise StructureError(
                f"image stack {self.images.shape} does not match label stack {self.labels.shape}")
        if not self.indices:
            self.indices = list(range(len(self.images)))

    def __len__(self):
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "SectionStack":
        idx = list(idx)
        return SectionStack(self.images[idx], self.labels[idx], self.resolution,
                            self.source, [self.indices[i] for i in idx])


# -- label encoding -----------------------------------------------------------

def encode_labels(membrane: np.ndarray, mitochondria: np.ndarray) -> np.ndarray:
    """Merge raw annotation masks; membrane wins over mitochondria wins over background."""
    membrane = np.asarray(membrane, bool)
    mitochondria = np.asarray(mitochondria, bool)
    out = np.zeros(membrane.shape, np.uint8)
    out[mitochondria] = MITOCHONDRIA
    out[membrane] = MEMBRANE
    return out


def decode_labels(label: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    label = np.asarray(label)
    return label == MEMBRANE, label == MITOCHONDRIA


def to_onehot(label: np.ndarray) -> np.ndarray:
    """Hard label (H, W) -> soft label (H, W, 3)."""
    return np.eye(NUM_CLASSES, dtype=np.float32)[np.asarray(label, dtype=np.intp)]


def check_labels(label: np.ndarray, name: str = "label") -> np.ndarray:
    label = np.asarray(label)
    bad = int(np.count_nonzero(label > MITOCHONDRIA))
    if bad:
        raise StructureError(f"{name}: {bad} pixel(s) carry a class index outside {{0, 1, 2}}")
    return label.astype(np.uint8)


def image_from_uint8(raw: np.ndarray) -> np.ndarray:
    return (np.asarray(raw, np.float32) / 127.5 - 1.0).astype(np.float32)


def image_to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# -- disk layout --------------------------------------------------------------

def _read_png(path):
    from PIL import Image
    with Image.open(path) as im:
        if im.mode == "P":
            # indexed PNG: keep palette indices, they are the class ids
            return np.array(im)
        return np.array(im.convert("L"))


def _write_png(path, arr):
    from PIL import Image
    Image.fromarray(np.asarray(arr, np.uint8), mode="L").save(path, optimize=False)


def load_stack(root: str | os.PathLike) -> SectionStack:
    """Read ``images/sec_%03d.png`` + ``labels/sec_%03d.png`` (or ``images.tif`` /
    ``labels.tif`` multipage stacks) listed by ``dataset.json``."""
    root = os.fspath(root)
    if not os.path.isdir(root) or not os.listdir(root):
        raise IngestionError(f"{root}: empty or missing dataset directory")
    manifest_path = os.path.join(root, MANIFEST)
    manifest = {}
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    resolution = tuple(manifest.get("resolution_nm", DEFAULT_RESOLUTION))

    tif_img, tif_lab = os.path.join(root, "images.tif"), os.path.join(root, "labels.tif")
    if os.path.exists(tif_img) or os.path.exists(tif_lab):
        import tifffile
        if not (os.path.exists(tif_img) and os.path.exists(tif_lab)):
            raise IngestionError(f"{root}: TIFF layout needs both images.tif and labels.tif")
        raw_imgs = np.asarray(tifffile.imread(tif_img))
        raw_labs = np.asarray(tifffile.imread(tif_lab))
        if raw_imgs.ndim == 2:
            raw_imgs, raw_labs = raw_imgs[None], raw_labs[None]
        if raw_imgs.shape != raw_labs.shape:
            raise StructureError(f"images.tif {raw_imgs.shape} vs labels.tif {raw_labs.shape}")
        labels = check_labels(raw_labs, "labels.tif")
        return SectionStack(image_from_uint8(raw_imgs), labels, resolution, root)

    count = manifest.get("sections")
    if count is None:
        img_dir = os.path.join(root, "images")
        count = len([f for f in os.listdir(img_dir) if f.endswith(".png")]) if os.path.isdir(img_dir) else 0
    if count == 0:
        raise IngestionError(f"{root}: no sections found")

    images, labels = [], []
    for i in range(count):
        ip = os.path.join(root, "images", f"sec_{i:03d}.png")
        lp = os.path.join(root, "labels", f"sec_{i:03d}.png")
        for p in (ip, lp):
            if not os.path.exists(p):
                raise IngestionError(f"section {i}: missing {p}")
        img, lab = _read_png(ip), _read_png(lp)
        if img.shape != lab.shape:
            raise StructureError(f"section {i}: image {img.shape} vs label {lab.shape}")
        if images and img.shape != images[0].shape:
            raise StructureError(f"section {i}: shape {img.shape} differs from section 0 {images[0].shape}")
        images.append(image_from_uint8(img))
        labels.append(check_labels(lab, f"section {i} label"))
    return SectionStack(np.stack(images), np.stack(labels), resolution, root)


def save_stack(stack: SectionStack, root: str | os.PathLike) -> None:
    root = os.fspath(root)
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    for i in range(len(stack)):
        _write_png(os.path.join(root, "images", f"sec_{i:03d}.png"), image_to_uint8(stack.images[i]))
        _write_png(os.path.join(root, "labels", f"sec_{i:03d}.png"), stack.labels[i])
    manifest = {"sections": len(stack), "resolution_nm": list(stack.resolution),
                "height": stack.shape[0], "width": stack.shape[1]}
    with open(os.path.join(root, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


# -- splits and crops ---------------------------------------------------------

def split_train_val(stack: SectionStack) -> tuple[SectionStack, SectionStack]:
    """First floor(n/2) sections train, the rest validate."""
    n = len(stack)
    if n < 2:
        raise SplitError(f"need at least 2 sections to split, got {n}")
    half = n // 2
    return stack.subset(range(half)), stack.subset(range(half, n))


@dataclass(frozen=True)
class PatchSpec:
    size: int = 256
    count: int = 1
    seed: int = 0

    def validate(self, shape: tuple[int, int]) -> None:
        if self.count < 1:
            raise PatchSpecError(f"patch count must be >= 1, got {self.count}")
        if self.size < 1 or self.size > min(shape):
            raise PatchSpecError(f"patch size {self.size} does not fit sections of shape {shape}")


def patch_offsets(stack_len: int, shape: tuple[int, int], spec: PatchSpec) -> np.ndarray:
    """(count, 3) array of (section, row, col) crop origins for ``spec``."""
    spec.validate(shape)
    rng = np.random.default_rng(spec.seed)
    sec = rng.integers(0, stack_len, size=spec.count)
    rows = rng.integers(0, shape[0] - spec.size + 1, size=spec.count)
    cols = rng.integers(0, shape[1] - spec.size + 1, size=spec.count)
    return np.stack([sec, rows, cols], axis=1)


def sample_patches(stack: SectionStack, spec: PatchSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Aligned (label, image) crops with origins drawn uniformly."""
    if len(stack) == 0:
        raise PatchSpecError("empty stack")
    s = spec.size
    out = []
    for k, r, c in patch_offsets(len(stack), stack.shape, spec):
        out.append((stack.labels[k, r:r + s, c:c + s].copy(), stack.images[k, r:r + s, c:c + s].copy()))
    return out


def nonparametric_sample(train: SectionStack, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """The memorising baseline: a uniform crop of a uniform training section."""
    if len(train) == 0:
        raise PatchSpecError("non-parametric sampling needs a non-empty training stack")
    return sample_patches(train, PatchSpec(size=size, count=1, seed=seed))[0]


# -- procedural corpus --------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    sections: int = 4
    height: int = 256
    width: int = 256
    cell_diameter: float = 24.0
    mito_density: float = 0.05
    mito_radius: tuple[float, float] = (2.0, 4.5)
    intensity: tuple[float, float, float] = (0.45, -0.75, -0.15)
    noise_sigma: float = 0.18
    texture_scale: float = 1.2
    resolution: tuple[float, float] = DEFAULT_RESOLUTION
    max_retries: int = 200


def _tessellate(shape, diameter, rng):
    h, w = shape
    side = max(h, w)
    engine = qmc.PoissonDisk(d=2, radius=diameter / side, rng=rng)
    pts = engine.fill_space() * side
    pts = pts[(pts[:, 0] < h) & (pts[:, 1] < w)]
    if len(pts) < 2:
        raise CorpusError(f"cell diameter {diameter} too large for a {shape} section")
    yy, xx = np.mgrid[0:h, 0:w]
    _, region = cKDTree(pts).query(np.column_stack([yy.ravel() + 0.5, xx.ravel() + 0.5]))
    return region.reshape(shape)


def _membranes(region):
    edge = np.zeros(region.shape, bool)
    edge[:, :-1] |= region[:, :-1] != region[:, 1:]
    edge[:-1, :] |= region[:-1, :] != region[1:, :]
    return ndi.binary_dilation(edge, structure=_CROSS)


def _ellipse(center, radii, angle, shape):
    reach = int(np.ceil(max(radii))) + 1
    r0, r1 = max(center[0] - reach, 0), min(center[0] + reach + 1, shape[0])
    c0, c1 = max(center[1] - reach, 0), min(center[1] + reach + 1, shape[1])
    yy, xx = np.mgrid[r0:r1, c0:c1]
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    out = np.zeros(shape, bool)
    out[r0:r1, c0:c1] = (u / radii[0]) ** 2 + (v / radii[1]) ** 2 <= 1.0
    return out


def _render(label, cfg: CorpusConfig, rng):
    base = np.asarray(cfg.intensity, np.float32)[label]
    noise = ndi.gaussian_filter(rng.standard_normal(label.shape), cfg.texture_scale)
    noise *= cfg.noise_sigma / max(noise.std(), 1e-8)
    return np.clip(base + noise, -1.0, 1.0).astype(np.float32)


def _make_section(cfg: CorpusConfig, rng):
    shape = (cfg.height, cfg.width)
    region = _tessellate(shape, cfg.cell_diameter, rng)
    membrane = _membranes(region)
    # keep one 4-connected interior per region; stray fragments become membrane
    interior = np.zeros(shape, np.int32) - 1
    for rid in np.unique(region):
        pix = (region == rid) & ~membrane
        lab, n = ndi.label(pix, structure=_CROSS)
        if n == 0:
            continue
        sizes = np.bincount(lab.ravel())[1:]
        keep = lab == (1 + int(np.argmax(sizes)))
        membrane |= pix & ~keep
        interior[keep] = rid

    rids = [r for r in np.unique(interior) if r >= 0]
    border = np.zeros(shape, bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    interior_ids = [r for r in rids if not np.any((interior == r) & border)]

    # mitochondria: ellipses kept one pixel clear of membrane and of each other
    mito = np.zeros(shape, bool)
    safe = {r: ndi.binary_erosion(interior == r, structure=_CROSS, border_value=0) for r in rids}
    areas = np.array([safe[r].sum() for r in rids], float)
    target = cfg.mito_density * float((interior >= 0).sum())
    placed_areas, placed_cells = [], []
    failures = 0
    while mito.sum() < target and areas.sum() > 0:
        rid = rids[rng.choice(len(rids), p=areas / areas.sum())]
        ys, xs = np.nonzero(safe[rid])
        k = rng.integers(len(ys))
        radii = rng.uniform(*cfg.mito_radius, size=2)
        blob = _ellipse((ys[k], xs[k]), radii, rng.uniform(0, np.pi), shape)
        halo = ndi.binary_dilation(blob, structure=_CROSS)
        if np.all(safe[rid][blob]) and not np.any(halo & mito) and blob.any():
            mito |= blob
            placed_areas.append(int(blob.sum()))
            placed_cells.append(int(rid))
            failures = 0
        else:
            failures += 1
            if failures > cfg.max_retries:
                if not placed_areas and cfg.mito_density > 0:
                    raise CorpusError("mitochondria placement failed after bounded retries")
                logger.info("mitochondria placement stopped at %d/%d pixels", mito.sum(), int(target))
                break

    label = encode_labels(membrane, mito)
    image = _render(label, cfg, rng)
    cell_areas = {int(r): int(((interior == r)).sum()) for r in interior_ids}
    truth = {
        "regions": len(rids),
        "interior_cells": len(interior_ids),
        "cell_areas_px": sorted(cell_areas.values()),
        "mito_count": len(placed_areas),
        "mito_areas_px": placed_areas,
        "mito_in_interior_cells": sum(c in cell_areas for c in placed_cells),
    }
    return image, label, truth


def make_synthetic_corpus(config: CorpusConfig | None = None, seed: int = 0) -> SectionStack:
    """Procedural cell tessellation with mitochondria and EM-like rendering.

    Each section records its own bookkeeping (region count, cells not touching
    the border, mitochondria count and areas) under ``stack.truth``.
    """
    cfg = config or CorpusConfig()
    if cfg.sections < 1:
        raise CorpusError("corpus needs at least one section")
    root = np.random.SeedSequence(seed)
    images, labels, truths = [], [], []
    for child in root.spawn(cfg.sections):
        img, lab, truth = _make_section(cfg, np.random.default_rng(child))
        images.append(img)
        labels.append(lab)
        truths.append(truth)
    stack = SectionStack(np.stack(images), np.stack(labels), tuple(cfg.resolution), f"synthetic:{seed}")
    stack.truth = {
        "seed": seed,
        "sections": truths,
        "mito_count": sum(t["mito_count"] for t in truths),
        "interior_cells": sum(t["interior_cells"] for t in truths),
    }
    return stack
