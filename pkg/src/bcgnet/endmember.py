"""Endmember counting and extraction from a width-concatenated cube pair.

The pipeline is: regress each band on the others to estimate the noise
floor, pick the signal subspace dimension by trading projection power
against noise power over the eigenvectors of the signal correlation
matrix, then extract that many pixel-anchored signatures by iterative
orthogonal maximum projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cube import HsiCube, concat_width, read_container, write_container
from .synth import spectral_angle

__all__ = [
    "EndmemberSet", "NoiseEstimate", "SubspaceEstimate",
    "estimate_noise", "estimate_subspace_dim", "vca_extract",
    "multitemporal_endmembers", "save_endmembers", "load_endmembers",
    "spectral_angle",
]


@dataclass
class EndmemberSet:
    """C x K matrix whose columns are endmember signatures.

    ``pixel_indices`` records which flat pixel anchored each column when
    the set came out of vertex extraction; it is None for sets loaded
    from files or built synthetically.
    """

    signatures: np.ndarray  # (C, K)
    pixel_indices: np.ndarray | None = None

    def __post_init__(self):
        self.signatures = np.asarray(self.signatures, dtype=np.float64)
        if self.signatures.ndim != 2:
            raise ValueError(f"signatures must be a (C, K) matrix, got {self.signatures.shape}")
        if not np.isfinite(self.signatures).all():
            raise ValueError("signatures must be finite")
        if self.k < 2:
            raise ValueError(f"need at least 2 endmembers, got {self.k}")
        norms = np.linalg.norm(self.signatures, axis=0)
        if (norms == 0.0).any():
            raise ValueError("all-zero endmember column")
        for i in range(self.k):
            for j in range(i + 1, self.k):
                if np.array_equal(self.signatures[:, i], self.signatures[:, j]):
                    raise ValueError(f"endmember columns {i} and {j} are identical")

    @property
    def bands(self) -> int:
        return self.signatures.shape[0]

    @property
    def k(self) -> int:
        return self.signatures.shape[1]


@dataclass
class NoiseEstimate:
    """Per-band noise diagnostics from band-on-bands regression."""

    residuals: np.ndarray   # (H, W, C)
    variances: np.ndarray   # (C,) diagonal noise covariance


@dataclass
class SubspaceEstimate:
    """Chosen subspace dimension plus its diagnostics.

    ``projection_errors[k]`` is the signal power left outside the best
    k-dimensional subspace, monotone nonincreasing in k.
    """

    k_hat: int
    noise_cov_diag: np.ndarray
    projection_errors: np.ndarray  # length C + 1, index = candidate dimension


def estimate_noise(cube: HsiCube) -> NoiseEstimate:
    """Estimate per-band noise by multiple linear regression.

    Each band is predicted from all the others over the whole image;
    the residual is the noise estimate for that band.  Constant bands
    make the regression meaningless and are rejected.
    """
    h, w, c = cube.values.shape
    if c < 3:
        raise ValueError(f"need at least 3 bands, got {c}")
    n = h * w
    if n <= c:
        raise ValueError(f"need more pixels ({n}) than bands ({c})")
    x = cube.values.reshape(n, c)
    ptp = x.max(axis=0) - x.min(axis=0)
    degenerate = np.flatnonzero(ptp == 0.0)
    if degenerate.size:
        raise ValueError(f"degenerate constant band(s) {degenerate.tolist()}: "
                         "noise regression is rank-deficient")

    residuals = np.empty_like(x)
    for i in range(c):
        others = np.delete(x, i, axis=1)
        beta, *_ = np.linalg.lstsq(others, x[:, i], rcond=None)
        residuals[:, i] = x[:, i] - others @ beta
    variances = np.mean(residuals ** 2, axis=0)
    return NoiseEstimate(residuals=residuals.reshape(h, w, c), variances=variances)


def estimate_subspace_dim(cube: HsiCube, noise: NoiseEstimate | None = None) -> SubspaceEstimate:
    """Pick the signal subspace dimension.

    Eigenvectors come from the correlation matrix of the denoised
    signal; a direction is kept when its data power exceeds twice its
    noise power, which is where including it stops reducing the mean
    squared projection error.  A relative floor keeps eigen-dust at
    machine precision from inflating the answer on noiseless input.
    """
    if noise is None:
        noise = estimate_noise(cube)
    h, w, c = cube.values.shape
    n = h * w
    x = cube.values.reshape(n, c)
    wres = noise.residuals.reshape(n, c)
    signal = x - wres

    r_y = (x.T @ x) / n
    r_n = (wres.T @ wres) / n
    r_x = (signal.T @ signal) / n

    eigvals, eigvecs = np.linalg.eigh(r_x)
    order = np.argsort(eigvals)[::-1]
    eigvecs = eigvecs[:, order]

    p_power = np.einsum("ci,cd,di->i", eigvecs, r_y, eigvecs)
    n_power = np.einsum("ci,cd,di->i", eigvecs, r_n, eigvecs)
    delta = 2.0 * n_power - p_power
    floor = 1e-10 * float(p_power.max())
    k_hat = int(max(1, np.count_nonzero(delta < -floor)))

    tail = np.concatenate([[p_power.sum()], p_power.sum() - np.cumsum(p_power)])
    tail = np.maximum(tail, 0.0)
    return SubspaceEstimate(k_hat=k_hat, noise_cov_diag=noise.variances,
                            projection_errors=tail)


def vca_extract(cube: HsiCube, k: int, seed: int) -> EndmemberSet:
    """Extract k pixel-anchored endmembers by vertex component analysis.

    The data is reduced to k - 1 principal components around its mean
    and lifted with a constant coordinate; the algorithm then repeatedly
    projects all pixels onto a random direction orthogonal to the span
    of the current picks and takes the pixel with the largest absolute
    projection (first occurrence wins, so ties are deterministic).
    Each returned column is the selected pixel reconstructed from the
    principal subspace, which is the pixel itself whenever the data
    truly spans k - 1 affine dimensions (noiseless simplex data) and a
    denoised version of it otherwise.  Columns appear in selection
    order; ``pixel_indices`` names the anchoring pixels.
    """
    if k < 2:
        raise ValueError(f"need k >= 2, got {k}")
    h, w, c = cube.values.shape
    n = h * w
    if n < k:
        raise ValueError(f"need at least {k} pixels, got {n}")
    y = cube.values.reshape(n, c).T  # (C, N)
    if np.unique(y.T, axis=0).shape[0] < k:
        raise ValueError(f"fewer than {k} distinct pixels in cube")

    y_mean = y.mean(axis=1, keepdims=True)
    y0 = y - y_mean
    d = k - 1
    _, eigvecs = np.linalg.eigh((y0 @ y0.T) / n)
    basis = eigvecs[:, ::-1][:, :d]  # top-d principal directions
    x_p = basis.T @ y0  # (d, N)
    c_lift = float(np.max(np.linalg.norm(x_p, axis=0)))
    if c_lift == 0.0:
        raise ValueError("cube has no spectral variation; vertices undefined")
    lifted = np.vstack([x_p, np.full((1, n), c_lift)])  # (k, N)

    rng = np.random.default_rng(seed)
    picks = np.zeros((k, k))
    picks[-1, 0] = 1.0
    indices = np.empty(k, dtype=np.intp)
    for i in range(k):
        while True:
            wdir = rng.random(k)
            f = wdir - picks @ (np.linalg.pinv(picks) @ wdir)
            norm = np.linalg.norm(f)
            if norm > 1e-12:
                break
        f /= norm
        proj = f @ lifted
        idx = int(np.argmax(np.abs(proj)))
        indices[i] = idx
        picks[:, i] = lifted[:, idx]
    reconstructed = basis @ x_p[:, indices] + y_mean
    return EndmemberSet(signatures=reconstructed, pixel_indices=indices)


def multitemporal_endmembers(x: HsiCube, y: HsiCube, k_override: int | None,
                             seed: int) -> tuple[EndmemberSet, SubspaceEstimate | None]:
    """Extract the shared endmember matrix of a bi-temporal pair.

    The two cubes are joined along the width axis so one extraction
    covers the materials of both dates.  When ``k_override`` is given
    the subspace estimation step is skipped and the second return value
    is None, which callers should record.
    """
    z = concat_width(x, y)
    if k_override is not None:
        return vca_extract(z, int(k_override), seed), None
    sub = estimate_subspace_dim(z)
    k = max(2, sub.k_hat)
    return vca_extract(z, k, seed), sub


def save_endmembers(em: EndmemberSet, path) -> None:
    """Persist signatures as a C x K single-band container."""
    write_container(path, em.signatures[:, :, None], "f32le", {"role": "endmembers"})


def load_endmembers(path) -> EndmemberSet:
    arr, header = read_container(path)
    if header.get("role") != "endmembers":
        raise ValueError(f"{path} is not an endmember file (role={header.get('role')!r})")
    return EndmemberSet(signatures=arr[:, :, 0])
