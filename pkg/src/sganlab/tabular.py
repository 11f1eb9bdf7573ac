"""Exact-gradient minimax on small discrete problems.

A label GAN learns q(y) and a conditional GAN learns q(x|y) against real
labels, each with its own table-valued discriminator.  All parameters are
logits: ``q = softmax(a)`` and ``D = sigmoid(d)``.  Gradients are analytic,
so the only approximation is the finite step budget.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, softmax

from .objectives import LOG2, optimal_discriminator


@dataclass
class TabularGANProblem:
    """Target joint table ``p_xy[y, x]`` plus initial logits for every table."""

    p_xy: np.ndarray
    a_y: np.ndarray | None = None  # q(y) logits
    b_xy: np.ndarray | None = None  # q(x|y) logits, row per y
    d_y: np.ndarray | None = None
    d_xy: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.p_xy, np.float64)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise ValueError("p_xy must be a nonnegative (|Y|, |X|) table summing to 1")
        if max(p.shape) > 16:
            raise ValueError("tabular harness supports at most 16 states per factor")
        self.p_xy = p
        ny, nx = p.shape
        self.a_y = np.zeros(ny) if self.a_y is None else np.asarray(self.a_y, np.float64)
        self.b_xy = np.zeros((ny, nx)) if self.b_xy is None else np.asarray(self.b_xy, np.float64)
        self.d_y = np.zeros(ny) if self.d_y is None else np.asarray(self.d_y, np.float64)
        self.d_xy = np.zeros((ny, nx)) if self.d_xy is None else np.asarray(self.d_xy, np.float64)

    @property
    def p_y(self) -> np.ndarray:
        return self.p_xy.sum(1)

    @property
    def p_x_given_y(self) -> np.ndarray:
        py = self.p_y[:, None]
        return np.divide(self.p_xy, py, out=np.full_like(self.p_xy, np.nan), where=py > 0)

    @classmethod
    def random(cls, n_y: int = 4, n_x: int = 4, seed: int = 0, concentration: float = 1.0,
               init_scale: float = 1.0) -> "TabularGANProblem":
        """Dirichlet target and Gaussian initial logits."""
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.full(n_y * n_x, concentration)).reshape(n_y, n_x)
        return cls(p, a_y=init_scale * rng.standard_normal(n_y),
                   b_xy=init_scale * rng.standard_normal((n_y, n_x)))


@dataclass
class TabularRates:
    g: float = 1.0
    d: float = 2.0
    d_steps: int = 10
    polish_steps: int = 500  # D-only ascent after the last generator step


@dataclass
class TabularResult:
    q_y: np.ndarray
    q_x_given_y: np.ndarray
    D_y: np.ndarray
    D_xy: np.ndarray
    value_y: float
    value_x: float
    tv_y: float
    tv_x: float
    d_err_y: float
    d_err_x: float
    converged: bool
    steps: int
    history: list = field(default_factory=list)

    def residuals(self) -> dict:
        return {"tv_y": self.tv_y, "tv_x": self.tv_x, "d_err_y": self.d_err_y, "d_err_x": self.d_err_x,
                "value_gap_y": self.value_y + 2 * LOG2, "value_gap_x": self.value_x + 2 * LOG2}


def _value(p, q, d):
    return float(np.sum(p * log_expit(d) + q * log_expit(-d)))


def _d_ascent(p, q, d, lr, steps):
    # per-cell step lr / (p + q): the value is separable and its curvature scales with p + q
    scale = lr / np.maximum(p + q, 1e-12)
    for _ in range(steps):
        s = expit(d)
        d = d + scale * (p * (1 - s) - q * s)
    return d


def _softmax_vjp(q, g):
    # gradient of sum(g * softmax(a)) w.r.t. a, row-wise
    return q * (g - np.sum(q * g, axis=-1, keepdims=True))


def tv_distance(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def conditional_tv(p_y, p_x_given_y, q_x_given_y) -> float:
    """Worst-row total variation over labels with p(y) > 0."""
    rows = [tv_distance(p_x_given_y[i], q_x_given_y[i]) for i in range(len(p_y)) if p_y[i] > 0]
    return max(rows) if rows else 0.0


def _d_error(p, q, d):
    star = optimal_discriminator(p.ravel(), q.ravel() / q.sum())
    live = ~np.isnan(star)
    return float(np.max(np.abs(expit(d.ravel())[live] - star[live]))) if live.any() else 0.0


def train_tabular(problem: TabularGANProblem, steps: int = 3000, rates: TabularRates | None = None,
                  tol: float = 1e-2, log_every: int = 0) -> TabularResult:
    """Alternate ``d_steps`` discriminator ascent steps with one generator descent step
    for both sub-GANs, then polish the discriminators against the final generators.

    Non-convergence is reported through ``converged`` and the residuals.
    """
    rates = rates or TabularRates()
    pb = problem
    p_y, p_xy = pb.p_y, pb.p_xy
    a, b = pb.a_y.copy(), pb.b_xy.copy()
    dy, dxy = pb.d_y.copy(), pb.d_xy.copy()
    history = []
    for step in range(steps):
        q_y = softmax(a)
        q_cond = softmax(b, axis=1)
        q_xy = p_y[:, None] * q_cond  # fake pairs carry real labels
        dy = _d_ascent(p_y, q_y, dy, rates.d, rates.d_steps)
        dxy = _d_ascent(p_xy, q_xy, dxy, rates.d, rates.d_steps)
        # dV/dq = log(1 - D); generators descend V
        a = a - rates.g * _softmax_vjp(q_y, log_expit(-dy))
        b = b - rates.g * p_y[:, None] * _softmax_vjp(q_cond, log_expit(-dxy))
        if log_every and step % log_every == 0:
            history.append({"step": step, "value_y": _value(p_y, q_y, dy), "value_x": _value(p_xy, q_xy, dxy),
                            "tv_y": tv_distance(p_y, q_y)})
    q_y = softmax(a)
    q_cond = softmax(b, axis=1)
    q_xy = p_y[:, None] * q_cond
    dy = _d_ascent(p_y, q_y, dy, rates.d, rates.polish_steps)
    dxy = _d_ascent(p_xy, q_xy, dxy, rates.d, rates.polish_steps)
    tv_y = tv_distance(p_y, q_y)
    tv_x = conditional_tv(p_y, pb.p_x_given_y, q_cond)
    vy, vx = _value(p_y, q_y, dy), _value(p_xy, q_xy, dxy)
    de_y, de_x = _d_error(p_y, q_y, dy), _d_error(p_xy, q_xy, dxy)
    converged = (tv_y < tol and tv_x < tol and abs(vy + 2 * LOG2) < tol and abs(vx + 2 * LOG2) < tol
                 and de_y < tol and de_x < tol)
    return TabularResult(q_y, q_cond, expit(dy), expit(dxy), vy, vx, tv_y, tv_x, de_y, de_x,
                         converged, steps, history)
