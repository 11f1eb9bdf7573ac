import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import eval_jacobi

from sganlab.labelops import CellMask, extract_cells, hull_raster
from sganlab.metrics import (SegReport, chi_squared, chi_squared_table, confusion_matrix, count_duplicates,
                             export_features, fool_rate, global_stats, gradient_attention, label_iu, label_share,
                             pairwise_iu, perimeter, read_features, roundness, seg_eval, shape_features,
                             support_size, zernike_magnitudes, zernike_moments)
from sganlab.metrics.shape import ZERNIKE_INDICES

from conftest import TinyNets


def disk(r, pad=4, centre=None):
    n = 2 * r + 1 + 2 * pad
    yy, xx = np.mgrid[:n, :n]
    c = (r + pad, r + pad) if centre is None else centre
    return (yy - c[0]) ** 2 + (xx - c[1]) ** 2 <= r * r


# -- chi-squared -------------------------------------------------------------------

def test_chi_squared_examples():
    assert chi_squared([0.5, 0.5], [0.75, 0.25]) == pytest.approx(0.5 * (0.25 ** 2 / 1.25 + 0.25 ** 2 / 0.75),
                                                                  abs=1e-12)
    assert chi_squared([0.5, 0.5], [0.75, 0.25]) == pytest.approx(0.06667, abs=1e-5)
    assert chi_squared([0.2, 0.8, 0], [0.2, 0.8, 0]) == 0
    assert chi_squared([1, 0], [0, 1]) == 1
    with pytest.raises(ValueError):
        chi_squared([1, 0], [0.5, 0.25, 0.25])


hists = st.integers(1, 12).flatmap(lambda n: st.tuples(
    arrays(float, n, elements=st.floats(0, 1)), arrays(float, n, elements=st.floats(0, 1))))


@settings(max_examples=200, deadline=None)
@given(hists)
def test_chi_squared_properties(pair):
    a, b = pair
    if a.sum() == 0 or b.sum() == 0:
        return
    a, b = a / a.sum(), b / b.sum()
    d = chi_squared(a, b)
    assert 0 <= d <= 1 + 1e-12
    assert d == chi_squared(b, a)
    assert (d == 0) == np.array_equal(a, b) or d < 1e-15


# -- shape scalars ------------------------------------------------------------------

def test_roundness_of_disks():
    assert roundness(disk(30)) >= 0.95
    values = [roundness(disk(r)) for r in (5, 10, 20, 40)]
    assert values[-1] >= values[0]
    assert all(0 < v <= 1 for v in values)


def test_perimeter_of_square_is_close_to_edge_length():
    sq = np.zeros((40, 40), bool)
    sq[5:35, 5:35] = True
    # the four-direction Crofton estimate runs a few percent short on axis-aligned edges
    assert perimeter(sq) == pytest.approx(120, rel=0.1)


def test_global_stats_without_mitochondria():
    lab = np.zeros((40, 40), np.uint8)
    lab[5:35, 5:35] = 1
    lab[8:32, 8:32] = 0
    st_ = global_stats([lab])
    assert st_.n_cells == 1 and st_.avg_mito_per_cell == 0
    assert st_.histogram("mito_size")[0].sum() == 0
    assert st_.avg_cell_size == pytest.approx(24 * 24 * 4.6 ** 2 / 1e6)


def test_global_stats_of_nothing_is_flagged_empty():
    st_ = global_stats([np.zeros((10, 10), np.uint8)])
    assert st_.empty and math.isnan(st_.avg_cell_size)


def test_chi_table_against_itself(corpus):
    ref = global_stats(corpus.labels)
    assert all(v == 0 for v in chi_squared_table(ref, ref).values())
    assert ref.n_mito == sum(t["mito_in_interior_cells"] for t in corpus.truth["sections"])
    areas = sorted(a for t in corpus.truth["sections"] for a in t["cell_areas_px"])
    assert np.allclose(sorted(ref.cell_sizes), np.array(areas) * 4.6 ** 2 / 1e6)


# -- segmentation -------------------------------------------------------------------

def brute_mean_iu(pairs, predict):
    ius = []
    for c in range(3):
        tp = fp = fn = 0
        for label, image in pairs:
            pred = predict(image)
            for t, p in zip(label.ravel(), pred.ravel()):
                tp += (t == c) and (p == c)
                fp += (t != c) and (p == c)
                fn += (t == c) and (p != c)
        if tp + fp + fn:
            ius.append(tp / (tp + fp + fn))
    return 100 * sum(ius) / len(ius)


def test_perfect_segmenter():
    rng = np.random.default_rng(0)
    labels = [rng.integers(0, 3, (6, 6)) for _ in range(3)]
    pairs = [(l, l) for l in labels]
    rep = seg_eval(lambda img: np.eye(3)[img], pairs)
    assert rep.mean_iu == 100 and rep.nll_mean == 0 and rep.nll_std == 0


def test_all_background_predictor():
    label = np.zeros((4, 4), int)
    label[:2] = 1
    label[0, :2] = 2  # 8 of 16 pixels are background
    rep = seg_eval(lambda img: np.tile([1.0, 0, 0], (4, 4, 1)), [(label, None)])
    assert rep.mean_iu == pytest.approx(brute_mean_iu([(label, None)], lambda img: np.zeros((4, 4), int)), abs=1e-12)
    assert rep.confusion.tolist() == [[8, 0, 0], [6, 0, 0], [2, 0, 0]]
    assert rep.per_class_iu == [pytest.approx(50.0), 0.0, 0.0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_mean_iu_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    pairs = [(rng.integers(0, 3, (5, 7)), rng.random((5, 7, 3))) for _ in range(n)]
    rep = seg_eval(lambda probs: probs, pairs)
    assert rep.mean_iu == pytest.approx(brute_mean_iu(pairs, lambda p: p.argmax(-1)), abs=1e-12)
    conf = sum(confusion_matrix(l, p.argmax(-1)) for l, p in pairs)
    assert np.array_equal(rep.confusion, conf)


def test_nll_statistics():
    label = np.zeros((2, 2), int)
    good = np.tile([0.5, 0.25, 0.25], (2, 2, 1))
    bad = np.tile([0.25, 0.5, 0.25], (2, 2, 1))
    rep = seg_eval(lambda p: p, [(label, good), (label, bad)])
    vals = [-math.log(0.5), -math.log(0.25)]
    assert rep.nll_mean == pytest.approx(np.mean(vals))
    assert rep.nll_std == pytest.approx(np.std(vals, ddof=1))
    assert isinstance(rep.to_dict()["confusion"], list)


def test_seg_eval_needs_pairs():
    with pytest.raises(ValueError):
        seg_eval(lambda p: p, [])


# -- label IU ------------------------------------------------------------------------

def brute_label_iu(a, b, k):
    h, w = a.shape[0] // k, a.shape[1] // k
    inter = union = 0
    for i in range(h):
        for j in range(w):
            fa = np.count_nonzero(a[i * k:(i + 1) * k, j * k:(j + 1) * k]) * 2 >= k * k
            fb = np.count_nonzero(b[i * k:(i + 1) * k, j * k:(j + 1) * k]) * 2 >= k * k
            inter += fa and fb
            union += fa or fb
    return 1.0 if union == 0 else inter / union


def test_label_iu_examples():
    a = np.zeros((64, 64), np.uint8)
    a[10:42, 10:42] = 1
    b = np.zeros_like(a)
    b[10:42, 18:50] = 2
    assert label_iu(a, a) == 1.0
    assert label_iu(a, np.where(a, 0, 1)) == 0.0
    assert label_iu(a, b) == brute_label_iu(a, b, 2) == 24 * 32 / (40 * 32)
    assert label_iu(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    with pytest.raises(ValueError):
        label_iu(a, a[:10])


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (8, 10), elements=st.integers(0, 2)), arrays(np.uint8, (8, 10), elements=st.integers(0, 2)),
       st.sampled_from([1, 2]))
def test_label_iu_brute_force(a, b, k):
    assert label_iu(a, b, k) == brute_label_iu(a, b, k)
    m = pairwise_iu([a, b, a], k)
    assert m[0, 1] == pytest.approx(label_iu(a, b, k)) and m[0, 2] == 1.0


# -- Zernike ------------------------------------------------------------------------

def brute_zernike(mask, n, l):
    # direct per-pixel sum, radial part from the Jacobi-polynomial identity
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    radius = max(math.hypot(y - cy, x - cx) for y, x in zip(ys, xs))
    total = 0j
    for y, x in zip(ys, xs):
        rho = math.hypot(y - cy, x - cx) / radius
        theta = math.atan2(y - cy, x - cx)
        radial = (-1) ** ((n - l) // 2) * rho ** l * eval_jacobi((n - l) // 2, l, 0, 1 - 2 * rho ** 2)
        total += radial * complex(math.cos(l * theta), -math.sin(l * theta))
    return (n + 1) / math.pi * total / radius ** 2


def test_zernike_matches_direct_integration_on_square():
    sq = np.zeros((70, 70), bool)
    sq[3:67, 3:67] = True
    fast = zernike_moments(sq)
    for i in (0, 5, 17, 48):
        n, l = ZERNIKE_INDICES[i]
        assert abs(fast[i] - brute_zernike(sq, n, l)) <= 1e-6


@settings(max_examples=10, deadline=None)
@given(arrays(bool, (9, 9)))
def test_zernike_matches_direct_integration_on_random_masks(mask):
    if mask.sum() < 2:
        return
    fast = zernike_moments(mask)
    for i, (n, l) in enumerate(ZERNIKE_INDICES):
        assert abs(fast[i] - brute_zernike(mask, n, l)) <= 1e-6


def test_zernike_rotation_and_translation_invariance(corpus):
    cell = max(extract_cells(corpus.labels[0]), key=lambda c: c.area).mask
    base = zernike_magnitudes(cell)
    for k in (1, 2, 3):
        assert np.abs(zernike_magnitudes(np.rot90(cell, k)) - base).max() <= 1e-3
    shifted = np.pad(cell, ((7, 0), (0, 11)))
    assert np.abs(zernike_magnitudes(shifted) - base).max() <= 1e-6


def test_disk_asymmetry_shrinks_with_radius():
    # staircase boundaries keep a fourfold harmonic whose weight falls like 1/r
    def worst(r):
        z = zernike_magnitudes(disk(r))
        return max(v for (n, l), v in zip(ZERNIKE_INDICES, z) if l % 4)
    assert worst(30) <= 1e-3
    off = [max(v for (n, l), v in zip(ZERNIKE_INDICES, zernike_magnitudes(disk(r))) if l) for r in (15, 30, 60)]
    assert off[0] > off[1] > off[2]


def test_zernike_of_empty_mask():
    with pytest.raises(ValueError):
        zernike_moments(np.zeros((3, 3), bool))


# -- features and the fool-rate harness ---------------------------------------------

@pytest.fixture(scope="module")
def corpus_cells():
    from sganlab.dataform import CorpusConfig, make_synthetic_corpus
    stack = make_synthetic_corpus(CorpusConfig(sections=6, height=160, width=160), seed=8)
    return [c for lab in stack.labels for c in extract_cells(lab)]


def test_feature_vector(corpus_cells):
    v = shape_features(corpus_cells[0])
    assert v.shape == (89,) and np.isfinite(v).all()
    with pytest.raises(ValueError):
        shape_features(CellMask(np.zeros((3, 3), bool), np.zeros((3, 3), bool), (0, 0, 3, 3), (1.0, 1.0)))


def test_fool_rate_null_and_separable(rng):
    real = rng.standard_normal((200, 10))
    fake = rng.standard_normal((200, 10))
    assert 40 <= fool_rate(real, fake) <= 60
    assert fool_rate(real, fake + 10) < 5
    with pytest.raises(ValueError):
        fool_rate(np.ones((30, 3)), np.ones((30, 3)))


def test_corpus_cells_are_digitally_convex(corpus_cells):
    # nearest-seed tessellation makes every cell its own hull, so hull fakes are the cells themselves
    assert all(np.array_equal(hull_raster(c.mask), c.mask) for c in corpus_cells)


def _bite(cell, rng):
    ys, xs = np.nonzero(cell.mask)
    k = rng.integers(len(ys))
    r = 0.35 * np.sqrt(cell.area)
    yy, xx = np.mgrid[:cell.mask.shape[0], :cell.mask.shape[1]]
    mask = cell.mask & ((yy - ys[k]) ** 2 + (xx - xs[k]) ** 2 > r * r)
    # a bite from the centre of the cell is not concave at the boundary; keep the largest piece
    from scipy import ndimage as ndi
    lab, n = ndi.label(mask)
    if n > 1:
        mask = lab == 1 + np.argmax(np.bincount(lab.ravel())[1:])
    return CellMask(mask, cell.mito & mask, cell.bbox, cell.centroid)


def test_convex_hulls_are_caught_on_concave_cells(corpus_cells, rng):
    real = [_bite(c, rng) for c in corpus_cells]
    real = [c for c in real if c.area > 10]
    feats = np.array([shape_features(c) for c in real])
    half = len(feats) // 2
    idx = rng.permutation(len(feats))
    null = fool_rate(feats[idx[:half]], feats[idx[half:]])
    hulls = [CellMask(hull_raster(c.mask), c.mito, c.bbox, c.centroid) for c in real]
    hull_feats = np.array([shape_features(c) for c in hulls])
    assert fool_rate(feats, hull_feats) < null


def test_export_round_trip(tmp_path, rng):
    vecs = rng.standard_normal((3, 89))
    path = export_features(vecs, tmp_path / "f.csv", tags=["a", "b", "c"])
    with open(path) as fh:
        assert len(list(csv.reader(fh))) == 4
    back, tags = read_features(path)
    assert np.abs(back - vecs).max() <= 1e-9 and tags == ["a", "b", "c"]
    with pytest.raises(ValueError):
        export_features([], tmp_path / "g.csv")


# -- support size --------------------------------------------------------------------

def random_pool(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.random((size, size)) < 0.5).astype(np.uint8) for _ in range(n)]


def test_pool_is_distinct():
    pool = random_pool(50)
    dup, _ = count_duplicates(pool)
    assert dup == 0


def test_constant_sampler():
    lab = random_pool(1)[0]
    est = support_size(lambda s: lab, [2, 4, 8], runs=3)
    assert est.s_star == 2 and est.estimate == 4 and not est.lower_bound


def test_pigeonhole_on_pool_of_hundred():
    pool = random_pool(100, seed=1)
    est = support_size(lambda s: pool[s % 100], [10, 20, 40, 101], runs=5, early_exit=True)
    assert est.s_star is not None and est.s_star <= 101
    assert 100 <= est.estimate <= 40_000


def test_no_duplicates_gives_lower_bound():
    est = support_size(lambda s: random_pool(1, seed=s % 2**32)[0], [2, 3], runs=3)
    assert est.lower_bound and est.estimate == 9 and est.s_star is None


@pytest.mark.parametrize("sizes,threshold", [([4, 2], 0.9), ([1, 2], 0.9), ([2, 4], 1.0), ([], 0.9)])
def test_support_argument_checks(sizes, threshold):
    with pytest.raises(ValueError):
        support_size(lambda s: np.zeros((4, 4)), sizes, threshold=threshold)


# -- gradient attention --------------------------------------------------------------

def _fd_attention(D, label, image, h=1e-6):
    from sganlab.metrics.attention import _as_pair, discriminator_score
    pair = _as_pair(label, image, torch.float64)
    grads = torch.zeros_like(pair)
    with torch.no_grad():
        flat, g = pair.view(-1), grads.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = discriminator_score(D, pair).item()
            flat[i] = old - h
            down = discriminator_score(D, pair).item()
            flat[i] = old
            g[i] = (up - down) / (2 * h)
    mag = grads.abs().mean(dim=(0, 2, 3))
    return {"image": mag[0].item(), "membrane": mag[2].item(), "mitochondria": mag[3].item()}


def test_attention_matches_finite_differences():
    t = TinyNets(seed=5, smooth=True)
    rng = np.random.default_rng(5)
    label = rng.integers(0, 3, (16, 16))
    image = rng.uniform(-1, 1, (16, 16))
    got = gradient_attention(t.D_x, label, image)
    ref = _fd_attention(t.D_x, label, image)
    for k in ref:
        assert abs(got[k] - ref[k]) <= 1e-3 * abs(ref[k])


class LabelOnly(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = torch.nn.Conv2d(3, 1, 3, padding=1).double()

    def forward(self, pair):
        return self.conv(pair[:, 1:])


def test_blind_channel_is_exactly_zero():
    torch.manual_seed(0)
    rng = np.random.default_rng(1)
    attn = gradient_attention(LabelOnly(), rng.integers(0, 3, (8, 8)), rng.uniform(-1, 1, (8, 8)))
    assert attn["image"] == 0.0
    assert attn["membrane"] > 0
    assert label_share(attn) == 1.0


def test_image_mean_discriminator():
    class ImageMean(torch.nn.Module):
        def forward(self, pair):
            return pair[:, :1]
    attn = gradient_attention(ImageMean(), np.zeros((4, 5), int), np.zeros((4, 5)))
    assert attn == {"membrane": 0.0, "mitochondria": 0.0, "image": pytest.approx(1 / 20)}
