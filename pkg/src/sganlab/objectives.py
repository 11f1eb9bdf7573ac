"""Value functions for the GAN variants and discrete optimality oracles.

Every ``v_*`` function returns :class:`LossTerms`.  Discriminator components
are what D minimises (negated value terms); generator components are what
the generators (and the reconstructor) minimise.  Generators use the
non-saturating surrogate ``-log D(fake)``; ``value`` reports the minimax form.

``part`` selects which side to build: ``"d"``, ``"g"`` or ``"both"``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .netspec import MultiScaleDiscriminator, weighted_log_value

logger = logging.getLogger(__name__)

EPS = 1e-12
LOG2 = math.log(2.0)


class LossError(ValueError):
    pass


def _scalar(v) -> float:
    return v.item() if torch.is_tensor(v) else float(v)


@dataclass
class LossTerms:
    variant: str
    d_components: dict = field(default_factory=dict)
    g_components: dict = field(default_factory=dict)
    value_components: dict = field(default_factory=dict)
    scales: dict = field(default_factory=dict)

    @property
    def d_loss(self):
        return sum(self.d_components.values()) if self.d_components else None

    @property
    def g_loss(self):
        return sum(self.g_components.values()) if self.g_components else None

    @property
    def value(self) -> float:
        return float(sum(self.value_components.values()))

    def record(self) -> dict:
        out = {"variant": self.variant}
        for prefix, comps in (("d", self.d_components), ("g", self.g_components)):
            for k, v in comps.items():
                out[f"{prefix}/{k}"] = _scalar(v)
        if self.value_components:
            out["value"] = self.value
        for k, v in self.scales.items():
            out[f"scale/{k}"] = float(v)
        return out


@dataclass(frozen=True)
class CycleWeights:
    reg: float = 10.0
    cyc: float = 10.0

    def __post_init__(self):
        for name in ("reg", "cyc"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise LossError(f"cycle weight {name} must be finite and >= 0, got {v}")


# -- helpers -----------------------------------------------------------------

def _adv(D: MultiScaleDiscriminator, x, real: bool, tag: str, scales: dict):
    logits = D(x)
    weights = D.spec.pyramid.weights
    for i, lg in enumerate(logits):
        term = weighted_log_value([lg], [1.0], real)
        scales[f"{tag}/{i}"] = term.detach()
    return weighted_log_value(logits, weights, real)


def _check_batch(*tensors):
    for t in tensors:
        if t.shape[0] == 0:
            raise LossError("empty batch")
    n = {t.shape[0] for t in tensors}
    if len(n) > 1:
        raise LossError(f"batch sizes disagree: {sorted(n)}")


def _check_pair(D, channels, what):
    if D.spec.input_channels != channels:
        raise LossError(f"{what} expects a {channels}-channel discriminator, "
                        f"got {D.spec.input_channels}")


def _pair(image, label):
    if image.shape[-2:] != label.shape[-2:]:
        raise LossError(f"image {tuple(image.shape)} and label {tuple(label.shape)} differ in size")
    return torch.cat([image, label], dim=1)


def _gan(variant, D, real, fake, part, tag="adv", scales=None):
    terms = LossTerms(variant)
    scales = terms.scales if scales is None else scales
    if part in ("d", "both"):
        r = _adv(D, real, True, f"{tag}_real", scales)
        f = _adv(D, fake.detach(), False, f"{tag}_fake", scales)
        terms.d_components = {"real": -r, "fake": -f}
        terms.value_components = {"real": r.item(), "fake": f.item()}
    if part in ("g", "both"):
        terms.g_components = {"adv": -_adv(D, fake, True, f"{tag}_gen", scales)}
    terms.scales = scales
    return terms


# -- cross-entropy -----------------------------------------------------------

def cross_entropy_labels(target, predicted, eps: float = EPS):
    """Mean per-pixel -log predicted[target].

    ``target`` is a hard label (N,H,W) / (H,W) or a soft label (N,3,H,W);
    ``predicted`` holds probabilities (N,3,H,W).  Numpy inputs use the
    (H,W) / (H,W,3) layout and return a float.
    """
    as_numpy = isinstance(predicted, np.ndarray)
    if as_numpy:
        predicted = torch.as_tensor(np.asarray(predicted, np.float64))
        if predicted.ndim == 3:
            predicted = predicted.permute(2, 0, 1)[None]
        target = torch.as_tensor(np.asarray(target))
        if target.ndim == 2:
            target = target[None]
        elif target.ndim == 3 and target.shape[-1] == 3 and target.dtype.is_floating_point:
            target = target.permute(2, 0, 1)[None]
    if predicted.ndim != 4:
        raise LossError(f"predicted must be (N,C,H,W), got {tuple(predicted.shape)}")
    if target.shape[-2:] != predicted.shape[-2:]:
        raise LossError(f"target {tuple(target.shape)} and prediction {tuple(predicted.shape)} differ")
    if target.ndim == 3 or (target.ndim == 4 and target.shape[1] == 1 and not target.dtype.is_floating_point):
        idx = target.reshape(predicted.shape[0], 1, *predicted.shape[-2:]).long()
        picked = predicted.gather(1, idx)
        if bool((picked < eps).any()):
            logger.warning("cross-entropy clamped %d zero-probability target pixel(s)",
                           int((picked < eps).sum()))
        out = -torch.log(picked.clamp_min(eps)).mean()
    else:
        out = -(target * torch.log(predicted.clamp_min(eps))).sum(dim=1).mean()
    return float(out) if as_numpy else out


# -- value functions ------------------------------------------------------------

def v_unsup(D, G, real_x, z, part: str = "both") -> LossTerms:
    """Plain GAN on images alone."""
    _check_batch(real_x, z)
    _check_pair(D, real_x.shape[1], "v_unsup")
    return _gan("unsup", D, real_x, G(z), part)


def v_joint(D, G, real_xy, z, part: str = "both") -> LossTerms:
    """GAN over the channel-concatenated (image, label) sample."""
    _check_batch(real_xy, z)
    if real_xy.shape[1] != 4:
        raise LossError(f"joint samples need 4 channels, got {real_xy.shape[1]}")
    _check_pair(D, 4, "v_joint")
    fake = G(z)
    if fake.shape[1] != 4:
        raise LossError(f"joint generator must emit 4 channels, got {fake.shape[1]}")
    return _gan("joint", D, real_xy, fake, part)


def v_label(D_y, G_y, real_y, z, part: str = "both", y_hat=None) -> LossTerms:
    """The label half of the factorised GAN; ``y_hat`` reuses a computed G_y(z)."""
    _check_batch(real_y, z)
    _check_pair(D_y, 3, "label GAN")
    return _gan("sgan/y", D_y, real_y, G_y(z) if y_hat is None else y_hat, part)


def v_sgan(D_y, G_y, D_x, G_x, real_x, real_y, z, part: str = "both",
           x_noise=None) -> tuple[LossTerms, LossTerms]:
    """Label GAN plus a conditional image GAN fed ground-truth labels."""
    _check_batch(real_x, real_y, z)
    _check_pair(D_y, 3, "label GAN")
    _check_pair(D_x, 4, "conditional GAN")
    terms_y = _gan("sgan/y", D_y, real_y, G_y(z), part)
    fake_x = G_x(real_y, x_noise) if x_noise is not None else G_x(real_y)
    terms_x = _gan("sgan/x", D_x, _pair(real_x, real_y), _pair(fake_x, real_y), part)
    return terms_y, terms_x


def v_dsgan_e2e(D_x, G_y, G_x, real_x, real_y, z, part: str = "both") -> LossTerms:
    """Conditional GAN whose fake pairs are (G_x(G_y(z)), G_y(z))."""
    _check_batch(real_x, real_y, z)
    _check_pair(D_x, 4, "v_dsgan_e2e")
    y_hat = G_y(z)
    return _gan("dsgan_e2e", D_x, _pair(real_x, real_y), _pair(G_x(y_hat), y_hat), part)


def v_dsgan_cycle(D_x, G_y, G_x, F_y, weights: CycleWeights, real_x, real_y, z,
                  part: str = "both", adversarial_labels: str = "real", y_hat=None) -> LossTerms:
    """Conditional GAN with reconstruction and cycle cross-entropy terms.

    ``adversarial_labels="synthetic"`` swaps the fake pair for
    (G_x(G_y(z)), G_y(z)), the end-to-end form without teacher forcing.
    ``y_hat`` lets the caller reuse an already computed G_y(z).
    """
    if not isinstance(weights, CycleWeights):
        weights = CycleWeights(*weights)
    _check_batch(real_x, real_y, z)
    _check_pair(D_x, 4, "v_dsgan_cycle")
    if y_hat is None:
        y_hat = G_y(z)
    fake_x = G_x(real_y)
    if adversarial_labels == "real":
        fake_pair = _pair(fake_x, real_y)
    elif adversarial_labels == "synthetic":
        fake_pair = _pair(G_x(y_hat), y_hat)
    else:
        raise LossError(f"adversarial_labels must be 'real' or 'synthetic', got {adversarial_labels!r}")
    terms = _gan("dsgan", D_x, _pair(real_x, real_y), fake_pair, part)

    if part in ("g", "both"):
        zero = real_x.new_zeros(())
        reg = weights.reg * cross_entropy_labels(real_y, F_y(real_x)) if weights.reg else zero
        if weights.cyc:
            cyc_real = weights.cyc * cross_entropy_labels(real_y, F_y(fake_x))
            cyc_fake = weights.cyc * cross_entropy_labels(y_hat, F_y(G_x(y_hat)))
        else:
            cyc_real = cyc_fake = zero
        terms.g_components.update(reg=reg, cyc_real=cyc_real, cyc_fake=cyc_fake)
        if terms.value_components:
            terms.value_components.update(reg=reg.item(), cyc_real=cyc_real.item(),
                                          cyc_fake=cyc_fake.item())
    return terms


# -- discrete-distribution oracles --------------------------------------------

@dataclass
class DiscreteDist:
    probs: np.ndarray
    support: tuple = ()

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if not self.support:
            self.support = tuple(range(len(self.probs)))
        if len(self.support) != len(self.probs):
            raise LossError("support and probability vector differ in length")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise LossError(f"not a distribution: {self.probs}")


def _aligned(p, q):
    p = p if isinstance(p, DiscreteDist) else DiscreteDist(p)
    q = q if isinstance(q, DiscreteDist) else DiscreteDist(q)
    if tuple(p.support) != tuple(q.support):
        raise LossError("distributions live on different supports")
    return p.probs, q.probs


def optimal_discriminator(p, q) -> np.ndarray:
    """p / (p + q) per state; NaN where both vanish."""
    pp, qq = _aligned(p, q)
    tot = pp + qq
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, pp / np.where(tot > 0, tot, 1.0), np.nan)


def _xlogy(x, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(np.where(x > 0, y, 1.0)), 0.0)


def gan_value(p, q, d_table) -> float:
    """sum_s p(s) log D(s) + q(s) log(1 - D(s)) over states with p + q > 0."""
    pp, qq = _aligned(p, q)
    d = np.asarray(d_table, np.float64)
    live = (pp + qq) > 0
    return float(np.sum(_xlogy(pp[live], d[live]) + _xlogy(qq[live], 1.0 - d[live])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats."""
    pp, qq = _aligned(p, q)
    m = 0.5 * (pp + qq)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_p = np.sum(_xlogy(pp, pp) - _xlogy(pp, m))
        kl_q = np.sum(_xlogy(qq, qq) - _xlogy(qq, m))
    return float(min(max(0.5 * (kl_p + kl_q), 0.0), LOG2))


def gan_value_at_optimum(p, q) -> float:
    return -2.0 * LOG2 + 2.0 * jsd(p, q)
