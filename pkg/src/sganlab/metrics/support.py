"""Birthday-paradox estimate of a generator's support size."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seg import pairwise_iu


@dataclass
class SupportEstimate:
    batch_sizes: list
    duplicates: dict  # size -> duplicate-pair counts, one per run
    min_distance: dict  # size -> min pairwise (1 - IU), one per run
    s_star: int | None
    estimate: int
    lower_bound: bool = False
    runs: int = 0
    threshold: float = 0.9
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"batch_sizes": list(self.batch_sizes),
                "duplicates": {str(k): v for k, v in self.duplicates.items()},
                "min_distance": {str(k): v for k, v in self.min_distance.items()},
                "s_star": self.s_star, "estimate": self.estimate, "lower_bound": self.lower_bound,
                "runs": self.runs, "threshold": self.threshold}


def count_duplicates(labels, threshold: float = 0.9, downsample: int = 2) -> tuple[int, float]:
    """Pairs with IU > threshold and the minimum pairwise distance 1 - IU."""
    if len(labels) < 2:
        return 0, 1.0
    iu = pairwise_iu(labels, downsample)
    upper = iu[np.triu_indices(len(labels), 1)]
    return int(np.count_nonzero(upper > threshold)), float(1.0 - upper.max())


def support_size(sampler, batch_sizes, runs: int = 10, threshold: float = 0.9, seed: int = 0,
                 downsample: int = 2, early_exit: bool = False) -> SupportEstimate:
    """Smallest batch size s* whose batches hold a duplicate in most runs; support ~ s*^2.

    ``sampler`` maps an integer seed to a hard label image.  Every draw uses a
    fresh seed.  With ``early_exit`` the sweep stops at s*.
    """
    sizes = [int(s) for s in batch_sizes]
    if sizes != sorted(sizes) or not sizes or sizes[0] < 2:
        raise ValueError("batch sizes must be ascending and >= 2")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    dups, mind = {}, {}
    s_star = None
    for s in sizes:
        dups[s], mind[s] = [], []
        for _ in range(runs):
            seeds = rng.integers(0, 2 ** 62, size=s)
            batch = [np.asarray(sampler(int(k))) for k in seeds]
            d, m = count_duplicates(batch, threshold, downsample)
            dups[s].append(d)
            mind[s].append(m)
        if s_star is None and sum(d > 0 for d in dups[s]) > runs / 2:
            s_star = s
            if early_exit:
                break
    if s_star is None:
        return SupportEstimate(sizes, dups, mind, None, sizes[-1] ** 2, True, runs, threshold,
                               ["no duplicates in a majority of runs; estimate is a lower bound"])
    return SupportEstimate(sizes, dups, mind, s_star, s_star ** 2, False, runs, threshold)


def plot_min_distance(est: SupportEstimate, stem: str) -> list[str]:
    """Mean/min pairwise distance per batch size as PNG, SVG and CSV."""
    import csv

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sizes = sorted(est.min_distance)
    means = [float(np.mean(est.min_distance[s])) for s in sizes]
    lows = [float(np.min(est.min_distance[s])) for s in sizes]
    with open(stem + ".csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch_size", "mean_min_distance", "min_min_distance"])
        w.writerows(zip(sizes, means, lows))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(sizes, means, "o-", label="mean over runs")
    ax.plot(sizes, lows, "s--", label="min over runs")
    ax.axhline(1 - est.threshold, color="grey", lw=0.8, ls=":")
    ax.set_xlabel("batch size s")
    ax.set_ylabel("min pairwise distance (1 - IU)")
    ax.legend()
    fig.tight_layout()
    out = []
    for ext in ("png", "svg"):
        fig.savefig(f"{stem}.{ext}", metadata={"Date": None} if ext == "svg" else None)
        out.append(f"{stem}.{ext}")
    plt.close(fig)
    return out + [stem + ".csv"]
