"""United unmixing network, change head, losses, and training.

The unmixing module is partial-siamese: one shared feature trunk (two
convolution branches with different spectral kernel depths, each gated
by channel attention, fused and mixed by a third convolution) feeding
two date-specific pointwise heads that emit abundance vectors through a
ReLU and an explicit sum-to-one map.  The change head is a small dense
network scoring an abundance pair as unchanged/changed; during training
it doubles as a constraint that pulls the two dates' abundances
together on pixels pseudo-labeled unchanged.

Training follows a warm-up-then-alternate schedule: reconstruction-only
epochs for the unmixer, focal-loss epochs for the change head with the
unmixer frozen, then per epoch one sweep updating the change head and
one sweep updating the unmixer against reconstruction plus the weighted
focal term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .cube import AbundanceCube, HsiCube, patch_stack
from .endmember import EndmemberSet
from .predetect import PseudoLabelSet

SUM_TO_ONE_EPS = 1e-8
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    """Network widths; defaults sized for desk-scale scenes."""

    bands: int
    k: int
    patch: int = 7
    ch_narrow: int = 4    # first conv of each branch
    ch_wide: int = 8      # second conv of each branch
    ch_fused: int = 8     # fusion conv over the concatenated branches
    head_hidden: int = 32

    def __post_init__(self):
        if self.patch % 2 == 0:
            raise ValueError("patch size must be odd")


TC_HIDDEN = 32  # change-head layer width; output layer is always 2 units


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    patch: int = 7
    batch: int = 64
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-3
    omega: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    warmup_uu: int = 20
    warmup_tc: int = 5
    seed: int = 0
    repeats: int = 3

    def __post_init__(self):
        if not (0.0 <= self.focal_alpha <= 1.0):
            raise ValueError("focal_alpha must be in [0, 1]")
        if self.focal_gamma < 0.0:
            raise ValueError("focal_gamma must be >= 0")
        if self.omega <= 0.0:
            raise ValueError("omega must be positive")
        if self.patch % 2 == 0:
            raise ValueError("patch size must be odd")


@dataclass
class EpochLog:
    epoch: int
    l_cos_x: float
    l_cos_y: float
    l_fc: float
    total: float


@dataclass
class TrainResult:
    uu_params: dict[str, Tensor]
    tc_params: dict[str, Tensor]
    log: list[EpochLog]
    model_cfg: ModelConfig
    config: TrainConfig = field(repr=False, default=None)


def sum_to_one(s, eps: float = SUM_TO_ONE_EPS) -> Tensor:
    """Normalize a nonnegative vector to (approximately) unit sum.

    y_i = s_i / (sum(s) + eps); the epsilon keeps an all-zero input
    well defined (it passes through as zeros).  Works on (K,) or (B, K).
    """
    s = s if isinstance(s, Tensor) else Tensor(s)
    total = s.data.sum(axis=-1, keepdims=True)
    denom = total + eps
    y = s.data / denom

    def pullback(g):
        dot = np.sum(g * s.data, axis=-1, keepdims=True)
        return g / denom - dot / denom ** 2

    return Tensor(y, _parents=((s, pullback),))


def reconstruct(em: EndmemberSet | np.ndarray, s):
    """Linear mixing: spectrum = endmember matrix times abundances.

    Accepts a plain array (returns an array) or a Tensor (returns a
    Tensor wired for gradients).  ``s`` may be (K,) or (B, K).
    """
    e = em.signatures if isinstance(em, EndmemberSet) else np.asarray(em, dtype=np.float64)
    k = e.shape[1]
    s_shape = s.data.shape if isinstance(s, Tensor) else np.shape(s)
    if s_shape[-1] != k:
        raise ValueError(f"abundance length {s_shape[-1]} does not match K={k}")
    if isinstance(s, Tensor):
        return ad.linear_constant(s, e.T)
    return np.asarray(s, dtype=np.float64) @ e.T


def cos_loss(x: np.ndarray, xhat) -> Tensor:
    """One minus cosine similarity, differentiable in the prediction.

    A zero-norm prediction (or reference) yields a loss of exactly 1
    with zero gradient, keeping training total.  Accepts (C,) vectors
    or (B, C) batches; returns a matching scalar or (B,) tensor.
    """
    xhat = xhat if isinstance(xhat, Tensor) else Tensor(xhat)
    single = xhat.data.ndim == 1
    h = xhat.data[None, :] if single else xhat.data
    xr = np.asarray(x, dtype=np.float64)
    xr = xr[None, :] if xr.ndim == 1 else xr
    if xr.shape != h.shape:
        raise ValueError(f"shape mismatch: reference {xr.shape} vs prediction {h.shape}")

    nx = np.linalg.norm(xr, axis=1)
    nh = np.linalg.norm(h, axis=1)
    safe = (nx > 0.0) & (nh > 0.0)
    nx_s = np.where(safe, nx, 1.0)
    nh_s = np.where(safe, nh, 1.0)
    dot = np.sum(xr * h, axis=1)
    val = np.where(safe, 1.0 - dot / (nx_s * nh_s), 1.0)

    def pullback(g):
        g2 = np.asarray(g, dtype=np.float64).reshape(-1, 1)
        ghat = -(xr / (nx_s * nh_s)[:, None] - (dot / (nx_s * nh_s ** 3))[:, None] * h)
        ghat = ghat * g2 * safe[:, None]
        return ghat[0] if single else ghat

    return Tensor(val[0] if single else val, _parents=((xhat, pullback),))


def focal_loss(p, labels, alpha: float, gamma: float) -> Tensor:
    """Class-balanced, hardness-weighted cross-entropy on changed-probability.

    ``p`` is the probability of "changed" and is clamped away from 0/1
    before the log; ``labels`` are 0/1.  gamma = 0 with alpha = 0.5
    reduces to half the binary cross-entropy.
    """
    p = p if isinstance(p, Tensor) else Tensor(p)
    g_lab = np.asarray(labels)
    if g_lab.shape != p.data.shape:
        raise ValueError(f"labels shape {g_lab.shape} does not match p shape {p.data.shape}")
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    pc = np.clip(p.data, lo, hi)
    inside = (p.data >= lo) & (p.data <= hi)
    is_pos = g_lab == 1
    pt = np.where(is_pos, pc, 1.0 - pc)
    at = np.where(is_pos, alpha, 1.0 - alpha)
    one_minus = 1.0 - pt
    val = -at * one_minus ** gamma * np.log(pt)

    def pullback(g):
        dpt = -at * one_minus ** gamma / pt
        if gamma != 0.0:
            dpt = dpt + at * gamma * one_minus ** (gamma - 1.0) * np.log(pt)
        dp = dpt * np.where(is_pos, 1.0, -1.0) * inside
        return g * dp

    return Tensor(val, _parents=((p, pullback),))


def init_uu_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """He-normal weights, zero biases, one tensor per layer slot."""
    k1 = ad.eca_kernel_size(cfg.ch_wide)
    shapes = {
        "c11.kernel": (3, 3, 1, 1, cfg.ch_narrow),
        "c12.kernel": (3, 3, 3, cfg.ch_narrow, cfg.ch_wide),
        "c21.kernel": (3, 3, 3, 1, cfg.ch_narrow),
        "c22.kernel": (3, 3, 3, cfg.ch_narrow, cfg.ch_wide),
        "eca1.weight": (k1,),
        "eca2.weight": (k1,),
        "c3.kernel": (3, 3, 1, 2 * cfg.ch_wide, cfg.ch_fused),
        "c4.weight": (cfg.bands * cfg.ch_fused, cfg.head_hidden),
        "c5.weight": (cfg.head_hidden, cfg.k),
        "c6.weight": (cfg.bands * cfg.ch_fused, cfg.head_hidden),
        "c7.weight": (cfg.head_hidden, cfg.k),
    }
    biases = {
        "c11.bias": (cfg.ch_narrow,), "c12.bias": (cfg.ch_wide,),
        "c21.bias": (cfg.ch_narrow,), "c22.bias": (cfg.ch_wide,),
        "eca1.bias": (1,), "eca2.bias": (1,),
        "c3.bias": (cfg.ch_fused,),
        "c4.bias": (cfg.head_hidden,), "c5.bias": (cfg.k,),
        "c6.bias": (cfg.head_hidden,), "c7.bias": (cfg.k,),
    }
    child = np.random.SeedSequence(seed).generate_state(len(shapes), dtype=np.uint64)
    params = {name: Tensor(ad.he_normal_init(shape, int(child[i])))
              for i, (name, shape) in enumerate(shapes.items())}
    for name, shape in biases.items():
        params[name] = Tensor(np.zeros(shape))
    return params


def init_tc_params(k: int, seed: int) -> dict[str, Tensor]:
    shapes = {
        "w11": (k, TC_HIDDEN), "w12": (k, TC_HIDDEN),
        "w2": (2 * TC_HIDDEN, TC_HIDDEN), "w3": (TC_HIDDEN, 2),
    }
    child = np.random.SeedSequence(seed).generate_state(len(shapes), dtype=np.uint64)
    params = {name: Tensor(ad.he_normal_init(shape, int(child[i])))
              for i, (name, shape) in enumerate(shapes.items())}
    for name in ("b11", "b12", "b2"):
        params[name] = Tensor(np.zeros(TC_HIDDEN))
    params["b3"] = Tensor(np.zeros(2))
    return params


def _trunk_features(p: dict[str, Tensor], patches: Tensor, cfg: ModelConfig) -> Tensor:
    b, m, _, c = patches.data.shape
    x5 = ad.reshape(patches, (b, m, m, c, 1))
    a = ad.conv3d(x5, p["c11.kernel"], p["c11.bias"])
    a = ad.conv3d(a, p["c12.kernel"], p["c12.bias"])
    a = ad.eca_block(a, p["eca1.weight"], p["eca1.bias"])
    bb = ad.conv3d(x5, p["c21.kernel"], p["c21.bias"])
    bb = ad.conv3d(bb, p["c22.kernel"], p["c22.bias"])
    bb = ad.eca_block(bb, p["eca2.weight"], p["eca2.bias"])
    fused = ad.concat([a, bb], axis=-1)
    fused = ad.conv3d(fused, p["c3.kernel"], p["c3.bias"])
    return ad.reshape(fused, (b, m, m, c * cfg.ch_fused))


def _abundance_head(features: Tensor, p: dict[str, Tensor], first: str, out: str,
                    patch: int) -> Tensor:
    h = ad.relu(ad.conv2d_pointwise(features, p[f"{first}.weight"], p[f"{first}.bias"]))
    h = ad.relu(ad.conv2d_pointwise(h, p[f"{out}.weight"], p[f"{out}.bias"]))
    mid = patch // 2
    center = ad.take_index(h, (slice(None), mid, mid, slice(None)))
    return sum_to_one(center)


def _as_batch(patches) -> tuple[Tensor, bool]:
    t = patches if isinstance(patches, Tensor) else Tensor(patches)
    if t.data.ndim == 3:
        return ad.reshape(t, (1,) + t.data.shape), True
    return t, False


def uu_forward(params: dict[str, Tensor], patch_x, patch_y, cfg: ModelConfig,
               with_features: bool = False):
    """Run both temporal branches; returns (S1, S2) abundance tensors.

    The trunk parameters are the same objects for both branches (weight
    sharing by construction); only the two pointwise heads differ.
    Accepts single (m, m, C) patches or (B, m, m, C) batches.
    """
    px, single = _as_batch(patch_x)
    py, _ = _as_batch(patch_y)
    feat_x = _trunk_features(params, px, cfg)
    feat_y = _trunk_features(params, py, cfg)
    s1 = _abundance_head(feat_x, params, "c4", "c5", cfg.patch)
    s2 = _abundance_head(feat_y, params, "c6", "c7", cfg.patch)
    if single:
        s1 = ad.reshape(s1, (cfg.k,))
        s2 = ad.reshape(s2, (cfg.k,))
    if with_features:
        return s1, s2, feat_x, feat_y
    return s1, s2


def tc_forward(params: dict[str, Tensor], s1, s2) -> Tensor:
    """Score an abundance pair; returns softmax probabilities (..., 2).

    Column 0 is the probability of "unchanged", column 1 of "changed".
    """
    s1 = s1 if isinstance(s1, Tensor) else Tensor(s1)
    s2 = s2 if isinstance(s2, Tensor) else Tensor(s2)
    h1 = ad.relu(ad.dense(s1, params["w11"], params["b11"]))
    h2 = ad.relu(ad.dense(s2, params["w12"], params["b12"]))
    feat = ad.concat([h1, h2], axis=-1)
    h = ad.relu(ad.dense(feat, params["w2"], params["b2"]))
    return ad.softmax(ad.dense(h, params["w3"], params["b3"]), axis=-1)


def change_probability(q: Tensor) -> Tensor:
    """Second softmax unit: the probability of "changed"."""
    index = (Ellipsis, 1)
    return ad.take_index(q, index)


def _batches(order: np.ndarray, size: int):
    for start in range(0, order.size, size):
        yield order[start:start + size]


def train(x: HsiCube, y: HsiCube, em: EndmemberSet, labels: PseudoLabelSet,
          cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          focal_term_in_uu_step: bool = True) -> TrainResult:
    """Warm up and alternately optimize the two modules.

    Phase A (``warmup_uu`` epochs) trains the unmixer on reconstruction
    alone; phase B (``warmup_tc`` epochs) trains the change head on the
    pseudo-labels with the unmixer frozen; the remaining epochs
    alternate one change-head sweep and one unmixer sweep per epoch,
    the latter minimizing both cosine losses plus omega times the mean
    focal loss with gradients flowing through the (frozen) change head.
    Both sweeps of an epoch reuse the same shuffled sample order.

    ``focal_term_in_uu_step=False`` drops the focal term from the
    unmixer sweep entirely; with omega = 0 the two paths produce
    bitwise-identical unmixer parameters.
    """
    n_unchanged, n_changed = labels.counts
    if n_unchanged == 0 or n_changed == 0:
        raise ValueError("pseudo-label set must contain both classes")
    if model_cfg is None:
        model_cfg = ModelConfig(bands=x.bands, k=em.k, patch=cfg.patch)
    if model_cfg.k != em.k:
        raise ValueError(f"model K={model_cfg.k} does not match endmember K={em.k}")

    patches_x = patch_stack(x, labels.rows, labels.cols, cfg.patch)
    patches_y = patch_stack(y, labels.rows, labels.cols, cfg.patch)
    center_x = x.values[labels.rows, labels.cols]
    center_y = y.values[labels.rows, labels.cols]
    g_all = labels.labels.astype(np.int64)
    n = g_all.size

    seeds = np.random.SeedSequence(cfg.seed).generate_state(3, dtype=np.uint64)
    uu = init_uu_params(model_cfg, int(seeds[0]))
    tc = init_tc_params(model_cfg.k, int(seeds[1]))
    shuffle_rng = np.random.default_rng(int(seeds[2]))
    adam_uu = Adam(uu, lr=cfg.lr, weight_decay=cfg.weight_decay)
    adam_tc = Adam(tc, lr=cfg.lr, weight_decay=cfg.weight_decay)

    phase_a_end = min(cfg.warmup_uu, cfg.epochs)
    phase_b_end = min(cfg.warmup_uu + cfg.warmup_tc, cfg.epochs)
    log: list[EpochLog] = []

    def check_finite(value: float, epoch: int, batch_idx: int) -> None:
        if not np.isfinite(value):
            raise ValueError(f"non-finite loss at epoch {epoch}, batch {batch_idx}")

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        batches_seen = 0

        if epoch < phase_a_end:
            for bi, idx in enumerate(_batches(order, cfg.batch)):
                s1, s2 = uu_forward(uu, Tensor(patches_x[idx]), Tensor(patches_y[idx]),
                                    model_cfg)
                lx = ad.tmean(cos_loss(center_x[idx], reconstruct(em, s1)))
                ly = ad.tmean(cos_loss(center_y[idx], reconstruct(em, s2)))
                loss = ad.add(lx, ly)
                check_finite(float(loss.data), epoch, bi)
                loss.backward()
                adam_uu.step()
                q = tc_forward(tc, s1.detach(), s2.detach())
                lfc = float(focal_loss(change_probability(q), g_all[idx],
                                       cfg.focal_alpha, cfg.focal_gamma).data.mean())
                sums += (float(lx.data), float(ly.data), lfc)
                batches_seen += 1
        elif epoch < phase_b_end:
            for bi, idx in enumerate(_batches(order, cfg.batch)):
                s1, s2 = uu_forward(uu, Tensor(patches_x[idx]), Tensor(patches_y[idx]),
                                    model_cfg)
                q = tc_forward(tc, s1.detach(), s2.detach())
                loss = ad.tmean(focal_loss(change_probability(q), g_all[idx],
                                           cfg.focal_alpha, cfg.focal_gamma))
                check_finite(float(loss.data), epoch, bi)
                loss.backward()
                adam_tc.step()
                lx = float(cos_loss(center_x[idx], reconstruct(em, s1.detach())).data.mean())
                ly = float(cos_loss(center_y[idx], reconstruct(em, s2.detach())).data.mean())
                sums += (lx, ly, float(loss.data))
                batches_seen += 1
        else:
            for bi, idx in enumerate(_batches(order, cfg.batch)):  # change-head sweep
                s1, s2 = uu_forward(uu, Tensor(patches_x[idx]), Tensor(patches_y[idx]),
                                    model_cfg)
                q = tc_forward(tc, s1.detach(), s2.detach())
                loss = ad.tmean(focal_loss(change_probability(q), g_all[idx],
                                           cfg.focal_alpha, cfg.focal_gamma))
                check_finite(float(loss.data), epoch, bi)
                loss.backward()
                adam_tc.step()
            for bi, idx in enumerate(_batches(order, cfg.batch)):  # unmixer sweep
                s1, s2 = uu_forward(uu, Tensor(patches_x[idx]), Tensor(patches_y[idx]),
                                    model_cfg)
                lx = ad.tmean(cos_loss(center_x[idx], reconstruct(em, s1)))
                ly = ad.tmean(cos_loss(center_y[idx], reconstruct(em, s2)))
                loss = ad.add(lx, ly)
                if focal_term_in_uu_step:
                    q = tc_forward(tc, s1, s2)
                    lfc = ad.tmean(focal_loss(change_probability(q), g_all[idx],
                                              cfg.focal_alpha, cfg.focal_gamma))
                    loss = ad.add(loss, ad.scale(lfc, cfg.omega))
                    lfc_val = float(lfc.data)
                else:
                    q = tc_forward(tc, s1.detach(), s2.detach())
                    lfc_val = float(focal_loss(change_probability(q), g_all[idx],
                                               cfg.focal_alpha, cfg.focal_gamma).data.mean())
                check_finite(float(loss.data), epoch, bi)
                loss.backward()
                adam_uu.step()
                sums += (float(lx.data), float(ly.data), lfc_val)
                batches_seen += 1

        lx_m, ly_m, lfc_m = sums / batches_seen
        log.append(EpochLog(epoch=epoch, l_cos_x=lx_m, l_cos_y=ly_m, l_fc=lfc_m,
                            total=lx_m + ly_m + cfg.omega * lfc_m))

    return TrainResult(uu_params=uu, tc_params=tc, log=log, model_cfg=model_cfg, config=cfg)


def infer_change_prob(uu: dict[str, Tensor], tc: dict[str, Tensor], x: HsiCube,
                      y: HsiCube, em: EndmemberSet, model_cfg: ModelConfig,
                      chunk: int = 256) -> tuple[np.ndarray, AbundanceCube, AbundanceCube]:
    """Per-pixel change probability and both abundance cubes.

    Pixels are processed in fixed row-major chunks, so the output is
    identical regardless of chunk size.
    """
    if em.k != model_cfg.k:
        raise ValueError(f"endmember K={em.k} does not match model K={model_cfg.k}")
    if em.bands != x.bands:
        raise ValueError(f"endmember bands {em.bands} do not match cube bands {x.bands}")
    if x.values.shape != y.values.shape:
        raise ValueError("bi-temporal cubes must share a shape")
    h, w = x.height, x.width
    prob = np.empty(h * w)
    a1 = np.empty((h * w, model_cfg.k))
    a2 = np.empty((h * w, model_cfg.k))
    all_rows, all_cols = np.unravel_index(np.arange(h * w), (h, w))
    for start in range(0, h * w, chunk):
        sl = slice(start, min(start + chunk, h * w))
        px = patch_stack(x, all_rows[sl], all_cols[sl], model_cfg.patch)
        py = patch_stack(y, all_rows[sl], all_cols[sl], model_cfg.patch)
        s1, s2 = uu_forward(uu, Tensor(px), Tensor(py), model_cfg)
        q = tc_forward(tc, s1.detach(), s2.detach())
        prob[sl] = q.data[:, 1]
        a1[sl] = s1.data
        a2[sl] = s2.data
    return (prob.reshape(h, w),
            AbundanceCube(values=a1.reshape(h, w, model_cfg.k), producer="uu"),
            AbundanceCube(values=a2.reshape(h, w, model_cfg.k), producer="uu"))


def save_checkpoint(path: str | Path, result: TrainResult) -> None:
    """Persist both parameter sets plus the widths needed to rebuild."""
    cfg = result.model_cfg
    kinds = {"kernel": "conv3d_kernel", "weight": "dense_weight", "bias": "bias"}
    entries = []
    for name, tensor in result.uu_params.items():
        kind = kinds[name.rsplit(".", 1)[-1]]
        if name.startswith("eca") and name.endswith("weight"):
            kind = "conv1d_kernel"
        entries.append((f"uu.{name}", kind, tensor))
    for name, tensor in result.tc_params.items():
        entries.append((f"tc.{name}", "dense_weight" if name.startswith("w") else "bias",
                        tensor))
    entries.append(("meta.patch", "meta", Tensor(float(cfg.patch))))
    ad.save_params(path, entries)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict[str, Tensor], ModelConfig]:
    entries = ad.load_params(path)
    uu: dict[str, Tensor] = {}
    tc: dict[str, Tensor] = {}
    patch = 7
    for name, _, tensor in entries:
        if name.startswith("uu."):
            uu[name[3:]] = tensor
        elif name.startswith("tc."):
            tc[name[3:]] = tensor
        elif name == "meta.patch":
            patch = int(tensor.data)
    ch_fused = uu["c3.kernel"].data.shape[-1]
    bands = uu["c4.weight"].data.shape[0] // ch_fused
    cfg = ModelConfig(
        bands=bands,
        k=uu["c5.weight"].data.shape[-1],
        patch=patch,
        ch_narrow=uu["c11.kernel"].data.shape[-1],
        ch_wide=uu["c12.kernel"].data.shape[-1],
        ch_fused=ch_fused,
        head_hidden=uu["c4.weight"].data.shape[-1],
    )
    return uu, tc, cfg


def write_train_log(path: str | Path, log: list[EpochLog]) -> None:
    """One text line per epoch: epoch l_cos_x l_cos_y l_fc total."""
    lines = [f"{e.epoch} {e.l_cos_x:.12g} {e.l_cos_y:.12g} {e.l_fc:.12g} {e.total:.12g}"
             for e in log]
    Path(path).write_text("\n".join(lines) + "\n")
