"""Core image containers and bit-exact file I/O.

A hyperspectral cube is an H x W x C array of reflectance-like values.
Cubes, abundance stacks, and label maps all share one on-disk container:
a plain-text ``<name>.hdr`` describing the layout plus a raw ``<name>.bin``
payload (band-sequential, row-major within band, little-endian).  Floating
payloads are IEEE-754 binary32, label payloads are int32.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

_HEADER_SUFFIX = ".hdr"
_PAYLOAD_SUFFIX = ".bin"

_DTYPES = {
    "f32le": np.dtype("<f4"),
    "i32le": np.dtype("<i4"),
}


@dataclass
class HsiCube:
    """H x W x C spectral image with an optional temporal role tag.

    Values are held in double precision; the on-disk container is
    float32, so only cubes whose values are float32-representable
    round-trip bit for bit.
    """

    values: np.ndarray  # (H, W, C) float64
    role: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"cube values must be 3-D (H, W, C), got shape {self.values.shape}")
        if min(self.values.shape) < 1:
            raise ValueError(f"cube dimensions must all be >= 1, got {self.values.shape}")
        _reject_non_finite(self.values, "cube")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass
class AbundanceCube:
    """Per-pixel abundance vectors, H x W x K.

    ``producer`` records which constraints the producing algorithm
    guarantees ("fcls" and "uu" outputs are nonnegative with the sums
    stated in their contracts; "truth" is exact).
    """

    values: np.ndarray  # (H, W, K) float64
    producer: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"abundance values must be 3-D (H, W, K), got {self.values.shape}")
        _reject_non_finite(self.values, "abundance cube")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def k(self) -> int:
        return self.values.shape[2]


@dataclass
class ChangeMap:
    """Per-pixel change labels with an optional probability layer.

    Label 0 is "unchanged"; positive labels are change-class ids.  The
    sentinel 255 marks predicted classes left unmatched by reference
    alignment.
    """

    labels: np.ndarray  # (H, W) int32
    prob: np.ndarray | None = None  # (H, W) float64 in [0, 1]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 2:
            raise ValueError(f"change map labels must be 2-D, got {self.labels.shape}")
        if (self.labels < 0).any():
            raise ValueError("change map labels must be >= 0")
        if self.prob is not None:
            self.prob = np.asarray(self.prob, dtype=np.float64)
            if self.prob.shape != self.labels.shape:
                raise ValueError("probability layer shape must match labels")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass
class Patch:
    """Square m x m x C window centered on one pixel."""

    center: tuple[int, int]
    values: np.ndarray  # (m, m, C)

    @property
    def size(self) -> int:
        return self.values.shape[0]


def _reject_non_finite(values: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{what} contains a non-finite value at index {idx}")


def _base_path(path: str | Path) -> Path:
    p = Path(path)
    if p.suffix in (_HEADER_SUFFIX, _PAYLOAD_SUFFIX):
        p = p.with_suffix("")
    return p


def write_container(path: str | Path, plane_stack: np.ndarray, dtype: str,
                    extra: dict[str, str] | None = None) -> None:
    """Write an (H, W, B) array as a header/payload file pair.

    ``dtype`` is "f32le" or "i32le".  The payload is band-sequential:
    all of band 0 row-major, then band 1, and so on.  Extra header keys
    (for example ``role``) follow the five mandatory lines in sorted
    order so output bytes are deterministic.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    arr = np.asarray(plane_stack)
    if arr.ndim != 3:
        raise ValueError(f"container expects a 3-D (H, W, B) array, got {arr.shape}")
    h, w, b = arr.shape
    base = _base_path(path)
    lines = [f"height={h}", f"width={w}", f"bands={b}", f"dtype={dtype}", "interleave=bsq"]
    for key in sorted(extra or {}):
        lines.append(f"{key}={(extra or {})[key]}")
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(_HEADER_SUFFIX).write_text("\n".join(lines) + "\n")
    # band-sequential layout: move the band axis first
    payload = np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(_DTYPES[dtype])
    base.with_suffix(_PAYLOAD_SUFFIX).write_bytes(payload.tobytes())


def read_container(path: str | Path) -> tuple[np.ndarray, dict[str, str]]:
    """Read a header/payload pair back into an (H, W, B) array.

    Float payloads come back as float64, label payloads as int32.
    Raises on missing files, malformed headers, payload size mismatch,
    and non-finite float values (reporting the first offending index).
    """
    base = _base_path(path)
    hdr_path = base.with_suffix(_HEADER_SUFFIX)
    bin_path = base.with_suffix(_PAYLOAD_SUFFIX)
    if not hdr_path.exists():
        raise FileNotFoundError(f"missing header file {hdr_path}")
    if not bin_path.exists():
        raise FileNotFoundError(f"missing payload file {bin_path}")

    header: dict[str, str] = {}
    for lineno, line in enumerate(hdr_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"unreadable header {hdr_path}: line {lineno} has no '='")
        key, _, value = line.partition("=")
        header[key.strip()] = value.strip()

    try:
        h = int(header["height"])
        w = int(header["width"])
        b = int(header["bands"])
        dtype = header["dtype"]
    except (KeyError, ValueError) as exc:
        raise ValueError(f"unreadable header {hdr_path}: {exc}") from exc
    if min(h, w, b) < 1:
        raise ValueError(f"unreadable header {hdr_path}: non-positive dimension")
    if header.get("interleave", "bsq") != "bsq":
        raise ValueError(f"unsupported interleave {header.get('interleave')!r}")
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r} in {hdr_path}")

    raw = bin_path.read_bytes()
    expected = h * w * b * 4
    if len(raw) != expected:
        raise ValueError(
            f"payload size mismatch for {bin_path}: expected {expected} bytes, got {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype=_DTYPES[dtype])
    arr = flat.reshape(b, h, w).transpose(1, 2, 0)
    if dtype == "f32le":
        arr = arr.astype(np.float64)
        _reject_non_finite(arr, f"payload {bin_path}")
    else:
        arr = arr.astype(np.int32)
    return arr, header


def save_cube(cube: HsiCube, path: str | Path) -> None:
    """Persist a cube as float32 header/payload files."""
    extra = {"role": cube.role} if cube.role else None
    write_container(path, cube.values, "f32le", extra)


def load_cube(path: str | Path) -> HsiCube:
    """Load a cube saved by :func:`save_cube`.

    Negative values are permitted (real sensor products contain them)
    but logged as a warning; non-finite values are rejected.
    """
    arr, header = read_container(path)
    if arr.dtype != np.float64:
        raise ValueError(f"{path} holds integer data, not a spectral cube")
    n_neg = int((arr < 0).sum())
    if n_neg:
        log.warning("cube %s contains %d negative values", path, n_neg)
    return HsiCube(values=arr, role=header.get("role", ""))


def save_abundance(abund: AbundanceCube, path: str | Path) -> None:
    write_container(path, abund.values, "f32le",
                    {"role": "abundance", "producer": abund.producer})


def load_abundance(path: str | Path) -> AbundanceCube:
    arr, header = read_container(path)
    return AbundanceCube(values=arr, producer=header.get("producer", ""))


def save_map(cmap: ChangeMap, path: str | Path) -> None:
    write_container(path, cmap.labels[:, :, None], "i32le", {"role": "labels"})
    if cmap.prob is not None:
        write_container(str(_base_path(path)) + "_prob", cmap.prob[:, :, None],
                        "f32le", {"role": "probability"})


def load_map(path: str | Path) -> ChangeMap:
    arr, _ = read_container(path)
    if arr.shape[2] != 1:
        raise ValueError(f"label map {path} must have a single band")
    prob = None
    prob_base = Path(str(_base_path(path)) + "_prob")
    if prob_base.with_suffix(_HEADER_SUFFIX).exists():
        parr, _ = read_container(prob_base)
        prob = parr[:, :, 0]
    return ChangeMap(labels=arr[:, :, 0], prob=prob)


def concat_width(x: HsiCube, y: HsiCube) -> HsiCube:
    """Join two cubes side by side along the width axis."""
    if x.height != y.height or x.bands != y.bands:
        raise ValueError(
            f"cannot concatenate cubes of shape {x.values.shape} and {y.values.shape}: "
            "height and band count must match"
        )
    return HsiCube(values=np.concatenate([x.values, y.values], axis=1))


def _mirror_indices(start: int, count: int, n: int) -> np.ndarray:
    # reflect without repeating the edge sample; period is 2n - 2
    idx = np.arange(start, start + count)
    if n == 1:
        return np.zeros(count, dtype=np.intp)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx).astype(np.intp)


def extract_patch(cube: HsiCube, row: int, col: int, m: int) -> Patch:
    """Cut an m x m x C window centered on (row, col).

    Windows that overhang the image borders are filled by mirror
    reflection, so a corner pixel still yields a full patch whose
    off-image samples mirror the interior (no edge repetition).
    """
    if m % 2 == 0 or m < 1:
        raise ValueError(f"patch size must be odd and positive, got {m}")
    h, w = cube.height, cube.width
    if m > min(2 * h - 1, 2 * w - 1):
        raise ValueError(f"patch size {m} exceeds mirror-padding limit for a {h}x{w} image")
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"center ({row}, {col}) outside {h}x{w} image")
    half = m // 2
    rows = _mirror_indices(row - half, m, h)
    cols = _mirror_indices(col - half, m, w)
    values = cube.values[np.ix_(rows, cols)]
    return Patch(center=(row, col), values=np.ascontiguousarray(values))


def patch_stack(cube: HsiCube, rows: np.ndarray, cols: np.ndarray, m: int) -> np.ndarray:
    """Extract patches at many centers at once; returns (n, m, m, C)."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    half = m // 2
    padded = np.pad(cube.values, ((half, half), (half, half), (0, 0)), mode="reflect")
    out = np.empty((rows.size, m, m, cube.bands), dtype=np.float64)
    for i, (r, c) in enumerate(zip(rows, cols)):
        out[i] = padded[r:r + m, c:c + m]
    return out


def add_noise_snr(cube: HsiCube, snr_db: float, seed: int) -> HsiCube:
    """Add white Gaussian noise at a target signal-to-noise ratio.

    The signal power is the mean squared value over the whole cube and
    the noise variance is ``P_signal / 10**(snr_db / 10)``.  An infinite
    ``snr_db`` returns an identical copy.
    """
    if not np.isfinite(snr_db):
        return HsiCube(values=cube.values.copy(), role=cube.role)
    p_signal = float(np.mean(cube.values ** 2))
    sigma = np.sqrt(p_signal / 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=cube.values.shape)
    return HsiCube(values=cube.values + noise, role=cube.role)
