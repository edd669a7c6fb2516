"""Constrained least-squares unmixing and the classic change rule.

``nnls`` is a Lawson-Hanson active-set solver.  ``fcls_pixel`` adds the
sum-to-one constraint by augmenting the system with a heavily weighted
row of ones and renormalizing the result exactly, so the output always
lies on the probability simplex.  ``puc_rule`` is the traditional
post-unmixing comparison: compare the dominant class of the two dates.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cube import AbundanceCube, ChangeMap, HsiCube
from .endmember import EndmemberSet

SUM_WEIGHT_FACTOR = 1e3  # scale of the sum-to-one row relative to mean |E|


@dataclass
class NnlsResult:
    x: np.ndarray
    converged: bool
    iterations: int


def nnls(a: np.ndarray, b: np.ndarray, max_outer: int | None = None) -> NnlsResult:
    """Solve min ||a @ x - b||^2 subject to x >= 0 (active-set method).

    Satisfies the KKT conditions to within 1e-8 * ||a.T @ b||_inf on
    active coordinates.  If the outer loop exceeds its cap (3 * n by
    default) the best iterate so far is returned with ``converged``
    False rather than raising, so pixel loops stay total.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 1 or a.shape[0] != b.shape[0]:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("nnls requires finite inputs")
    m, n = a.shape
    cap = 3 * n if max_outer is None else max_outer

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    grad_scale = float(np.abs(a.T @ b).max())
    tol = 1e-8 * max(grad_scale, 1e-300)

    outer = 0
    w = a.T @ (b - a @ x)
    while True:
        candidates = ~passive
        if not candidates.any() or w[candidates].max() <= tol:
            return NnlsResult(x=x, converged=True, iterations=outer)
        if outer >= cap:
            return NnlsResult(x=x, converged=False, iterations=outer)
        outer += 1
        j = int(np.flatnonzero(candidates)[np.argmax(w[candidates])])
        passive[j] = True
        while True:
            z = np.zeros(n)
            z[passive], *_ = np.linalg.lstsq(a[:, passive], b, rcond=None)
            if z[passive].min() > 0.0:
                x = z
                break
            mask = passive & (z <= 0.0)
            alpha = np.min(x[mask] / (x[mask] - z[mask]))
            x = x + alpha * (z - x)
            # coordinates that hit the boundary leave the passive set
            boundary = 1e-14 * (1.0 + float(x.max()))
            passive &= x > boundary
            x[~passive] = 0.0
        w = a.T @ (b - a @ x)


def fcls_pixel(em: EndmemberSet | np.ndarray, x: np.ndarray) -> tuple[np.ndarray, str | None]:
    """Fully constrained unmixing of a single spectrum.

    Returns the abundance vector and a flag: None on success,
    "zero_sum" when the nonnegative solution collapsed to zero (the
    spectrum points away from the endmember cone; a uniform vector is
    returned), or "nnls_cap" when the solver hit its iteration cap.
    """
    e = em.signatures if isinstance(em, EndmemberSet) else np.asarray(em, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (e.shape[0],):
        raise ValueError(f"spectrum length {x.shape} does not match {e.shape[0]} bands")
    rho = SUM_WEIGHT_FACTOR * float(np.mean(np.abs(e)))
    a_aug = np.vstack([e, rho * np.ones((1, e.shape[1]))])
    b_aug = np.concatenate([x, [rho]])
    res = nnls(a_aug, b_aug)
    total = res.x.sum()
    if total == 0.0:
        k = e.shape[1]
        return np.full(k, 1.0 / k), "zero_sum"
    s = res.x / total
    return s, (None if res.converged else "nnls_cap")


@dataclass
class FclsReport:
    """Pixels whose unmixing needed a fallback, with the reason."""

    flagged: list[tuple[int, int, str]] = field(default_factory=list)


def worker_count() -> int:
    """Thread cap from the BCG_THREADS environment variable (0 = sequential)."""
    raw = os.environ.get("BCG_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def fcls_cube(em: EndmemberSet, cube: HsiCube,
              n_threads: int | None = None) -> tuple[AbundanceCube, FclsReport]:
    """Unmix every pixel of a cube; bitwise independent of pixel order.

    Rows are distributed over ``n_threads`` workers (default: the
    BCG_THREADS environment variable) writing disjoint slices, so the
    result is identical to a sequential run.
    """
    if em.bands != cube.bands:
        raise ValueError(f"endmember bands {em.bands} do not match cube bands {cube.bands}")
    h, w = cube.height, cube.width
    out = np.empty((h, w, em.k), dtype=np.float64)
    flags: list[list[tuple[int, int, str]]] = [[] for _ in range(h)]

    def run_row(r: int) -> None:
        for c in range(w):
            s, flag = fcls_pixel(em, cube.values[r, c])
            out[r, c] = s
            if flag is not None:
                flags[r].append((r, c, flag))

    threads = worker_count() if n_threads is None else n_threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_row, range(h)))
    else:
        for r in range(h):
            run_row(r)
    report = FclsReport(flagged=[item for row in flags for item in row])
    return AbundanceCube(values=out, producer="fcls"), report


def puc_rule(a1: AbundanceCube, a2: AbundanceCube) -> tuple[ChangeMap, ChangeMap]:
    """Post-unmixing comparison of dominant classes.

    A pixel is changed when the argmax class of its two abundance
    vectors differs (ties go to the lowest index).  Changed pixels get
    the from-to id ``c1 * K + c2`` in the multiclass map; this rule is
    deliberately faithful to its known weakness, flipping on arbitrarily
    small abundance differences.
    """
    if a1.values.shape != a2.values.shape:
        raise ValueError(f"abundance shapes differ: {a1.values.shape} vs {a2.values.shape}")
    k = a1.k
    c1 = np.argmax(a1.values, axis=2)
    c2 = np.argmax(a2.values, axis=2)
    changed = c1 != c2
    binary = ChangeMap(labels=changed.astype(np.int32))
    multi = ChangeMap(labels=np.where(changed, c1 * k + c2, 0).astype(np.int32))
    return binary, multi
