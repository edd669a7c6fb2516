"""Seeded bi-temporal scene generator with known abundance ground truth.

The generator builds a library of smooth random spectral signatures,
lays out a Voronoi-style class map with mixed borders for the first
date, edits rectangular blocks to create the second date, mixes both
abundance fields through the signature library, and finally adds white
Gaussian noise.  Everything is a pure function of the config, so a
seed fully determines the scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cube import AbundanceCube, ChangeMap, HsiCube, add_noise_snr

_MIN_PAIR_ANGLE_DEG = 10.0


@dataclass
class SynthConfig:
    """Knobs for one synthetic scene."""

    height: int = 64
    width: int = 64
    bands: int = 30
    k_true: int = 4                      # 2..8 signatures
    n_change_classes: int = 4            # 0..8 block edits
    block_range: tuple[int, int] = (6, 10)
    snr_db: float = 30.0
    seed: int = 0
    n_regions: int = 0                   # 0 = pick from k_true
    border_width: float = 1.5            # mixing half-width, pixels
    signature_overlap: float = 0.55      # 0 = independent curves, ->1 = near-collinear set

    def __post_init__(self):
        if not (2 <= self.k_true <= 8):
            raise ValueError(f"k_true must be in 2..8, got {self.k_true}")
        if not (0 <= self.n_change_classes <= 8):
            raise ValueError(f"n_change_classes must be in 0..8, got {self.n_change_classes}")
        if not (0.0 <= self.signature_overlap < 1.0):
            raise ValueError("signature_overlap must be in [0, 1)")


@dataclass
class SyntheticScene:
    """A generated scene plus its full ground truth."""

    cube_t1: HsiCube
    cube_t2: HsiCube
    true_abund_t1: AbundanceCube
    true_abund_t2: AbundanceCube
    binary_ref: ChangeMap
    multiclass_ref: ChangeMap
    endmembers_true: np.ndarray  # (C, K)
    seed: int
    snr_db: float
    config: SynthConfig = field(repr=False, default=None)


def spectral_angle(u: np.ndarray, v: np.ndarray) -> float:
    """Angle in radians between two spectra."""
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("spectral angle undefined for a zero vector")
    c = float(np.dot(u, v) / (nu * nv))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _smooth_curve(rng: np.random.Generator, bands: int) -> np.ndarray:
    # baseline plus a few Gaussian bumps keeps curves positive and smooth
    lam = np.arange(bands, dtype=np.float64)
    curve = np.full(bands, 0.15 + 0.1 * rng.random())
    for _ in range(rng.integers(2, 5)):
        center = rng.uniform(0, bands - 1)
        width = rng.uniform(bands / 12.0, bands / 4.0)
        amp = rng.uniform(0.2, 0.9)
        curve = curve + amp * np.exp(-0.5 * ((lam - center) / width) ** 2)
    return curve


def make_signatures(rng: np.random.Generator, bands: int, k: int,
                    overlap: float = 0.0) -> np.ndarray:
    """Draw k smooth positive signatures with pairwise angle >= 10 degrees.

    ``overlap`` blends each curve toward a shared pair of base curves;
    large values keep pairwise angles legal while making the set close
    to linearly dependent, which is what real material libraries look
    like and what makes per-pixel least squares noise-sensitive.
    """
    base = [_smooth_curve(rng, bands) for _ in range(2)]
    min_angle = np.deg2rad(_MIN_PAIR_ANGLE_DEG)
    sigs: list[np.ndarray] = []
    attempts = 0
    while len(sigs) < k:
        attempts += 1
        if attempts > 500:
            raise ValueError(f"could not draw {k} signatures with pairwise angle >= 10 deg")
        cand = _smooth_curve(rng, bands)
        if overlap > 0.0:
            share = 0.5 * (base[0] + base[1]) + 0.35 * (rng.random() - 0.5) * (base[0] - base[1])
            cand = (1.0 - overlap) * cand + overlap * share
        cand = cand / np.sqrt(np.mean(cand ** 2))  # equal power per material
        if all(spectral_angle(cand, s) >= min_angle for s in sigs):
            sigs.append(cand)
    return np.stack(sigs, axis=1)  # (C, K)


def _region_layout(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """Voronoi-with-mixed-borders abundance field, (H, W, K)."""
    h, w, k = cfg.height, cfg.width, cfg.k_true
    n_regions = cfg.n_regions if cfg.n_regions > 0 else max(3 * k, 12)
    for _ in range(50):
        seeds_rc = np.column_stack([
            rng.uniform(0, h, size=n_regions),
            rng.uniform(0, w, size=n_regions),
        ])
        classes = np.concatenate([
            np.arange(k), rng.integers(0, k, size=n_regions - k),
        ]) if n_regions >= k else rng.integers(0, k, size=n_regions)
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        d2 = ((rr[:, :, None] - seeds_rc[:, 0]) ** 2
              + (cc[:, :, None] - seeds_rc[:, 1]) ** 2)
        order = np.argsort(d2, axis=2)
        first = order[:, :, 0]
        second = order[:, :, 1]
        d1 = np.sqrt(np.take_along_axis(d2, first[:, :, None], axis=2))[:, :, 0]
        dsec = np.sqrt(np.take_along_axis(d2, second[:, :, None], axis=2))[:, :, 0]
        c1 = classes[first]
        c2 = classes[second]
        # distance to the region boundary is half the nearest-seed gap
        gap = 0.5 * (dsec - d1)
        t = np.clip(gap / cfg.border_width, 0.0, 1.0)
        share = np.where(c1 == c2, 1.0, 0.5 + 0.5 * t)

        abund = np.zeros((h, w, k), dtype=np.float64)
        flat = abund.reshape(-1, k)
        pix = np.arange(h * w)
        flat[pix, c1.ravel()] += share.ravel()
        flat[pix, c2.ravel()] += (1.0 - share).ravel()

        pure_per_class = [int((abund[:, :, j] == 1.0).sum()) for j in range(k)]
        if all(n > 0 for n in pure_per_class):
            return abund
    raise ValueError("could not lay out regions with at least one pure pixel per class")


def _place_blocks(rng: np.random.Generator, cfg: SynthConfig) -> list[tuple[int, int, int, int]]:
    blocks: list[tuple[int, int, int, int]] = []
    lo, hi = cfg.block_range
    for _ in range(cfg.n_change_classes):
        placed = False
        for _ in range(200):
            bh = int(rng.integers(lo, hi + 1))
            bw = int(rng.integers(lo, hi + 1))
            if bh > cfg.height or bw > cfg.width:
                continue
            r0 = int(rng.integers(0, cfg.height - bh + 1))
            c0 = int(rng.integers(0, cfg.width - bw + 1))
            if all(r0 + bh <= r or r + h2 <= r0 or c0 + bw <= c or c + w2 <= c0
                   for (r, c, h2, w2) in blocks):
                blocks.append((r0, c0, bh, bw))
                placed = True
                break
        if not placed:
            raise ValueError(
                f"infeasible config: cannot place {cfg.n_change_classes} "
                f"non-overlapping change blocks on a {cfg.height}x{cfg.width} scene"
            )
    return blocks


def _edit_blocks(rng: np.random.Generator, cfg: SynthConfig, abund_t1: np.ndarray,
                 blocks: list[tuple[int, int, int, int]]) -> tuple[np.ndarray, np.ndarray]:
    """Apply one edit per change class; returns (abund_t2, multiclass labels)."""
    h, w, k = abund_t1.shape
    abund_t2 = abund_t1.copy()
    labels = np.zeros((h, w), dtype=np.int32)
    for j, (r0, c0, bh, bw) in enumerate(blocks):
        window = (slice(r0, r0 + bh), slice(c0, c0 + bw))
        dominant = int(np.bincount(np.argmax(abund_t1[window], axis=2).ravel(),
                                   minlength=k).argmax())
        kind = j % 3
        new_block = None
        if kind == 1:  # move: copy content from elsewhere in the scene
            for _ in range(50):
                sr = int(rng.integers(0, h - bh + 1))
                sc = int(rng.integers(0, w - bw + 1))
                cand = abund_t1[sr:sr + bh, sc:sc + bw]
                if np.any(cand != abund_t1[window]):
                    new_block = cand.copy()
                    break
        if new_block is None:  # replace / delete-and-refill with a different pure class
            target = int((dominant + 1 + rng.integers(0, k - 1)) % k)
            new_block = np.zeros((bh, bw, k), dtype=np.float64)
            new_block[:, :, target] = 1.0
        abund_t2[window] = new_block
        changed = np.any(abund_t2[window] != abund_t1[window], axis=2)
        if not changed.any():
            # pathological draw: force a pure-class replacement that differs
            target = (dominant + 1) % k
            new_block = np.zeros((bh, bw, k), dtype=np.float64)
            new_block[:, :, target] = 1.0
            abund_t2[window] = new_block
            changed = np.any(abund_t2[window] != abund_t1[window], axis=2)
        labels[window][changed] = j + 1
    return abund_t2, labels


def gen_synthetic_scene(cfg: SynthConfig) -> SyntheticScene:
    """Build a full bi-temporal scene from a config (pure function)."""
    rng = np.random.default_rng(cfg.seed)
    signatures = make_signatures(rng, cfg.bands, cfg.k_true, cfg.signature_overlap)
    abund_t1 = _region_layout(rng, cfg)
    blocks = _place_blocks(rng, cfg)
    abund_t2, labels = _edit_blocks(rng, cfg, abund_t1, blocks)

    clean_t1 = abund_t1 @ signatures.T
    clean_t2 = abund_t2 @ signatures.T
    noise_seed_t1 = int(rng.integers(0, 2 ** 62))
    noise_seed_t2 = int(rng.integers(0, 2 ** 62))
    cube_t1 = add_noise_snr(HsiCube(values=clean_t1, role="t1"), cfg.snr_db, noise_seed_t1)
    cube_t2 = add_noise_snr(HsiCube(values=clean_t2, role="t2"), cfg.snr_db, noise_seed_t2)

    binary = (labels > 0).astype(np.int32)
    return SyntheticScene(
        cube_t1=cube_t1,
        cube_t2=cube_t2,
        true_abund_t1=AbundanceCube(values=abund_t1, producer="truth"),
        true_abund_t2=AbundanceCube(values=abund_t2, producer="truth"),
        binary_ref=ChangeMap(labels=binary),
        multiclass_ref=ChangeMap(labels=labels),
        endmembers_true=signatures,
        seed=cfg.seed,
        snr_db=cfg.snr_db,
        config=cfg,
    )
