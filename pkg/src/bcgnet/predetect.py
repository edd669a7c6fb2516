"""Pseudo binary labels from change-vector magnitudes.

Change vector analysis reduces the bi-temporal pair to one magnitude
per pixel; a two-component Gaussian mixture fit by EM splits the
magnitudes into an unchanged and a changed population; the Bayes
crossover of the two weighted densities gives the decision threshold;
confident pixels on each side become the training labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cube import HsiCube


@dataclass
class GaussMix2:
    """Two-component 1-D Gaussian mixture; component 0 is "unchanged"."""

    w0: float
    mu0: float
    var0: float
    w1: float
    mu1: float
    var1: float
    loglik_trace: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if abs(self.w0 + self.w1 - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if self.var0 <= 0.0 or self.var1 <= 0.0:
            raise ValueError("mixture variances must be positive")
        if self.mu0 > self.mu1:
            raise ValueError("component 0 must have the smaller mean")


@dataclass
class PseudoLabelSet:
    """Selected training pixels with binary labels and confidences."""

    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray       # 0 unchanged, 1 changed
    confidence: np.ndarray   # in [0, 1]

    def __post_init__(self):
        n = self.rows.size
        if not (self.cols.size == self.labels.size == self.confidence.size == n):
            raise ValueError("pseudo-label arrays must have equal length")
        if n and len({(int(r), int(c)) for r, c in zip(self.rows, self.cols)}) != n:
            raise ValueError("pseudo-label positions must be unique")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    @property
    def counts(self) -> tuple[int, int]:
        changed = int(self.labels.sum())
        return self.labels.size - changed, changed


def cva_magnitude(x: HsiCube, y: HsiCube) -> np.ndarray:
    """Per-pixel Euclidean norm of the spectral difference, (H, W)."""
    if x.values.shape != y.values.shape:
        raise ValueError(f"cube shapes differ: {x.values.shape} vs {y.values.shape}")
    return np.sqrt(np.sum((y.values - x.values) ** 2, axis=2))


def _loglik(x: np.ndarray, w: np.ndarray, mu: np.ndarray, var: np.ndarray) -> float:
    comp = w * np.exp(-0.5 * (x[:, None] - mu) ** 2 / var) / np.sqrt(2.0 * np.pi * var)
    return float(np.sum(np.log(comp.sum(axis=1))))


def em_fit_2gauss(magnitudes: np.ndarray, max_iter: int = 500, tol: float = 1e-6,
                  seed: int = 0) -> GaussMix2:
    """Fit a 2-component Gaussian mixture to flat magnitudes by EM.

    Initialization splits the samples at the 70th percentile (changed
    pixels are the minority in change detection, so the upper tail is
    the changed component).  The log-likelihood is asserted to be
    nondecreasing at every iteration.  On variance collapse the fit is
    restarted once from a 50th-percentile split, then gives up.  The
    seed is accepted for interface stability; the fit itself is
    deterministic.
    """
    del seed
    x = np.asarray(magnitudes, dtype=np.float64).ravel()
    if x.size < 10:
        raise ValueError(f"need at least 10 samples, got {x.size}")
    if np.ptp(x) == 0.0:
        raise ValueError("magnitudes have zero variance; mixture fit is degenerate")

    def run(split_pct: float) -> GaussMix2:
        t0 = np.percentile(x, split_pct)
        lower = x[x <= t0]
        upper = x[x > t0]
        if lower.size == 0 or upper.size == 0:
            raise _VarianceCollapse()
        w = np.array([lower.size, upper.size], dtype=np.float64) / x.size
        mu = np.array([lower.mean(), upper.mean()])
        var = np.array([lower.var(), upper.var()])
        if (var < 1e-12).any():
            raise _VarianceCollapse()

        trace: list[float] = []
        prev = -np.inf
        for _ in range(max_iter):
            # E step
            comp = w * np.exp(-0.5 * (x[:, None] - mu) ** 2 / var) / np.sqrt(2 * np.pi * var)
            total = comp.sum(axis=1)
            total = np.maximum(total, 1e-300)
            resp = comp / total[:, None]
            ll = float(np.sum(np.log(total)))
            assert ll >= prev - 1e-9 * max(1.0, abs(prev)), "EM log-likelihood decreased"
            trace.append(ll)
            converged = np.isfinite(prev) and (ll - prev) < tol
            prev = ll
            if converged:
                break
            # M step
            nk = resp.sum(axis=0)
            w = nk / x.size
            mu = (resp * x[:, None]).sum(axis=0) / nk
            var = (resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk
            if (var < 1e-12).any():
                raise _VarianceCollapse()
        order = np.argsort(mu)
        w, mu, var = w[order], mu[order], var[order]
        return GaussMix2(w0=float(w[0]), mu0=float(mu[0]), var0=float(var[0]),
                         w1=float(w[1]), mu1=float(mu[1]), var1=float(var[1]),
                         loglik_trace=trace)

    try:
        return run(70.0)
    except _VarianceCollapse:
        try:
            return run(50.0)
        except _VarianceCollapse:
            raise ValueError("mixture variance collapsed; magnitudes are not bimodal") from None


class _VarianceCollapse(Exception):
    pass


def bayes_threshold(mix: GaussMix2) -> float:
    """Smallest magnitude where the changed component wins the posterior.

    Scans [mu0, mu1] for the first crossing of the weighted densities,
    then bisects it down to 1e-9 of the mean gap.  If the changed
    component already dominates at mu0 the threshold is mu0 itself.
    """
    if mix.mu0 == mix.mu1:
        raise ValueError("degenerate mixture: equal component means")

    def excess(t: np.ndarray | float):
        d1 = mix.w1 * np.exp(-0.5 * (t - mix.mu1) ** 2 / mix.var1) / np.sqrt(2 * np.pi * mix.var1)
        d0 = mix.w0 * np.exp(-0.5 * (t - mix.mu0) ** 2 / mix.var0) / np.sqrt(2 * np.pi * mix.var0)
        return d1 - d0

    grid = np.linspace(mix.mu0, mix.mu1, 1025)
    values = excess(grid)
    nonneg = np.flatnonzero(values >= 0.0)
    if nonneg.size == 0:
        return float(mix.mu1)
    first = int(nonneg[0])
    if first == 0:
        return float(mix.mu0)
    lo, hi = float(grid[first - 1]), float(grid[first])
    target = 1e-9 * (mix.mu1 - mix.mu0)
    while hi - lo > target:
        mid = 0.5 * (lo + hi)
        if excess(mid) >= 0.0:
            hi = mid
        else:
            lo = mid
    return hi


def select_pseudo_labels(magnitude: np.ndarray, threshold: float, n_unchanged: int,
                         n_changed: int, mode: str = "confidence",
                         seed: int | None = None) -> PseudoLabelSet:
    """Pick training pixels from each side of the threshold.

    Confidence is the distance from the threshold, normalized to [0, 1]
    separately per side.  The default mode takes the most confident
    pixels of each class; ``mode="random"`` samples uniformly instead.
    Ties are broken by row-major scan order.
    """
    mag = np.asarray(magnitude, dtype=np.float64)
    changed = mag > threshold
    conf = np.abs(mag - threshold)
    for side in (changed, ~changed):
        peak = conf[side].max() if side.any() else 0.0
        if peak > 0.0:
            conf[side] = conf[side] / peak
        else:
            conf[side] = 0.0

    flat_changed = changed.ravel()
    flat_conf = conf.ravel()
    sides = {0: np.flatnonzero(~flat_changed), 1: np.flatnonzero(flat_changed)}
    wanted = {0: n_unchanged, 1: n_changed}
    for label, pool in sides.items():
        if wanted[label] > pool.size:
            raise ValueError(
                f"requested {wanted[label]} {'changed' if label else 'unchanged'} samples "
                f"but only {pool.size} pixels are on that side of the threshold"
            )

    if mode == "confidence":
        chosen = {
            label: pool[np.argsort(-flat_conf[pool], kind="stable")[:wanted[label]]]
            for label, pool in sides.items()
        }
    elif mode == "random":
        rng = np.random.default_rng(seed)
        chosen = {
            label: rng.choice(pool, size=wanted[label], replace=False)
            for label, pool in sides.items()
        }
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")

    idx = np.concatenate([np.sort(chosen[0]), np.sort(chosen[1])])
    labels = np.concatenate([
        np.zeros(chosen[0].size, dtype=np.int32),
        np.ones(chosen[1].size, dtype=np.int32),
    ])
    rows, cols = np.unravel_index(idx, mag.shape)
    return PseudoLabelSet(rows=rows.astype(np.intp), cols=cols.astype(np.intp),
                          labels=labels, confidence=flat_conf[idx])


def save_pseudo_labels(labels: PseudoLabelSet, path: str | Path) -> None:
    """Write labels as text: a counts header then one sample per line."""
    n_unchanged, n_changed = labels.counts
    lines = [f"unchanged={n_unchanged} changed={n_changed}"]
    for r, c, g, conf in zip(labels.rows, labels.cols, labels.labels, labels.confidence):
        lines.append(f"{r} {c} {g} {conf:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_pseudo_labels(path: str | Path) -> PseudoLabelSet:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"empty pseudo-label file {path}")
    body = [ln.split() for ln in lines[1:] if ln.strip()]
    rows = np.array([int(p[0]) for p in body], dtype=np.intp)
    cols = np.array([int(p[1]) for p in body], dtype=np.intp)
    labels = np.array([int(p[2]) for p in body], dtype=np.int32)
    conf = np.array([float(p[3]) for p in body], dtype=np.float64)
    out = PseudoLabelSet(rows=rows, cols=cols, labels=labels, confidence=conf)
    header = dict(kv.split("=") for kv in lines[0].split())
    if (int(header.get("unchanged", -1)), int(header.get("changed", -1))) != out.counts:
        raise ValueError(f"count header of {path} does not match its samples")
    return out
