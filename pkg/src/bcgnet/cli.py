"""Subcommand CLI gluing the stages into reproducible pipelines.

Every subcommand is a pure function of its flags, input files, and
seed: re-running it writes byte-identical outputs.  Exit codes: 0 on
success, 1 on usage errors, 2 on data errors.  A plain ``key=value``
config file can pre-set any flag; explicit flags win.  The environment
variable ``BCG_THREADS`` caps worker threads for per-pixel stages
(0 = sequential).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import changemap as cm
from . import cube as cb
from . import endmember as em_mod
from . import model as md
from . import pipeline as pl
from . import predetect as pd
from . import report as rp
from .synth import SynthConfig, gen_synthetic_scene


def load_config(path: str | Path) -> dict[str, str]:
    """Read a key=value config file; '#' starts a comment line."""
    values: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key=value): {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-3)
    p.add_argument("--omega", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--alpha", type=float, default=0.25)
    p.add_argument("--warmup-uu", type=int, default=20)
    p.add_argument("--warmup-tc", type=int, default=5)
    p.add_argument("--patch", type=int, default=7)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bcgnet",
        description="binary-change-guided hyperspectral multiclass change detection",
    )
    parser.add_argument("--config", help="key=value file pre-setting any flag")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic bi-temporal scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--bands", type=int, default=30)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--snr", type=float, default=30.0)
    p.add_argument("--block-min", type=int, default=6)
    p.add_argument("--block-max", type=int, default=10)

    p = sub.add_parser("endmembers", help="estimate K and extract the endmember matrix")
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--k", type=int, default=None, help="override the estimated count")

    p = sub.add_parser("unmix-fcls", help="constrained least-squares abundance maps")
    p.add_argument("--endmembers", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="abundance")

    p = sub.add_parser("predetect", help="pseudo binary labels from magnitude statistics")
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-unchanged", type=int, required=True)
    p.add_argument("--n-changed", type=int, required=True)
    p.add_argument("--mode", choices=("confidence", "random"), default="confidence")

    p = sub.add_parser("train", help="train the unmixing and change modules")
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--endmembers", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_train_flags(p)

    p = sub.add_parser("infer", help="change probability and abundances for every pixel")
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--endmembers", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score inferred maps against references")
    p.add_argument("--pred-dir", required=True, help="directory written by infer")
    p.add_argument("--ref-dir", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="baseline / reconstruction-only / full ablation")
    p.add_argument("--scene-dir", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--n-unchanged", type=int, default=640)
    p.add_argument("--n-changed", type=int, default=128)
    _add_train_flags(p)

    p = sub.add_parser("render", help="write a change map as PGM/PPM (and optionally PNG)")
    p.add_argument("--map", required=True, help="label-map container path")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--kind", choices=("binary", "multi", "auto"), default="auto")
    p.add_argument("--png", default=None, help="also render a PNG figure here")

    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        values = load_config(known.config)
        for sub_action in parser._subparsers._group_actions:
            for sp in sub_action.choices.values():
                overrides = {}
                for action in sp._actions:
                    if action.dest in values:
                        text = values[action.dest]
                        overrides[action.dest] = action.type(text) if action.type else text
                sp.set_defaults(**overrides)
    return parser.parse_args(argv)


def _load_scene_dir(scene_dir: Path):
    from .synth import SyntheticScene

    meta = load_config(scene_dir / "scene.txt")
    em_true = em_mod.load_endmembers(scene_dir / "endmembers_true")
    return SyntheticScene(
        cube_t1=cb.load_cube(scene_dir / "t1"),
        cube_t2=cb.load_cube(scene_dir / "t2"),
        true_abund_t1=cb.load_abundance(scene_dir / "truth_abund_t1"),
        true_abund_t2=cb.load_abundance(scene_dir / "truth_abund_t2"),
        binary_ref=cb.load_map(scene_dir / "binary_ref"),
        multiclass_ref=cb.load_map(scene_dir / "multiclass_ref"),
        endmembers_true=em_true.signatures,
        seed=int(meta["seed"]),
        snr_db=float(meta["snr_db"]),
    )


def cmd_gen_data(args) -> None:
    cfg = SynthConfig(height=args.height, width=args.width, bands=args.bands,
                      k_true=args.k, n_change_classes=args.classes,
                      block_range=(args.block_min, args.block_max),
                      snr_db=args.snr, seed=args.seed)
    scene = gen_synthetic_scene(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cb.save_cube(scene.cube_t1, out / "t1")
    cb.save_cube(scene.cube_t2, out / "t2")
    cb.save_abundance(scene.true_abund_t1, out / "truth_abund_t1")
    cb.save_abundance(scene.true_abund_t2, out / "truth_abund_t2")
    cb.save_map(scene.binary_ref, out / "binary_ref")
    cb.save_map(scene.multiclass_ref, out / "multiclass_ref")
    em_mod.save_endmembers(em_mod.EndmemberSet(signatures=scene.endmembers_true),
                           out / "endmembers_true")
    (out / "scene.txt").write_text(pl.metrics_text({
        "seed": cfg.seed, "snr_db": cfg.snr_db, "height": cfg.height,
        "width": cfg.width, "bands": cfg.bands, "k": cfg.k_true,
        "classes": cfg.n_change_classes,
    }))


def cmd_endmembers(args) -> None:
    x = cb.load_cube(args.t1)
    y = cb.load_cube(args.t2)
    em, sub = em_mod.multitemporal_endmembers(x, y, args.k, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    em_mod.save_endmembers(em, out / "endmembers")
    info = {"k": em.k, "source": "override" if args.k is not None else "estimated"}
    if sub is not None:
        info["k_hat"] = sub.k_hat
    (out / "subspace.txt").write_text(pl.metrics_text(info))


def cmd_unmix_fcls(args) -> None:
    from .unmix import fcls_cube

    em = em_mod.load_endmembers(args.endmembers)
    cube = cb.load_cube(args.cube)
    abund, report = fcls_cube(em, cube)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cb.save_abundance(abund, out / args.name)
    lines = [f"flagged={len(report.flagged)}"]
    lines += [f"{r} {c} {reason}" for r, c, reason in report.flagged]
    (out / f"{args.name}_report.txt").write_text("\n".join(lines) + "\n")


def cmd_predetect(args) -> None:
    x = cb.load_cube(args.t1)
    y = cb.load_cube(args.t2)
    labels, magnitude, mix, threshold = pl.predetect_labels(
        x, y, args.n_unchanged, args.n_changed, mode=args.mode, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cb.write_container(out / "magnitude", magnitude[:, :, None], "f32le",
                       {"role": "magnitude"})
    (out / "mixture.txt").write_text(pl.metrics_text({
        "w0": mix.w0, "mu0": mix.mu0, "var0": mix.var0,
        "w1": mix.w1, "mu1": mix.mu1, "var1": mix.var1,
        "threshold": threshold, "em_iterations": len(mix.loglik_trace),
    }))
    pd.save_pseudo_labels(labels, out / "labels.txt")


def _train_cfg_from(args) -> md.TrainConfig:
    return md.TrainConfig(patch=args.patch, batch=args.batch, epochs=args.epochs,
                          lr=args.lr, weight_decay=args.weight_decay, omega=args.omega,
                          focal_gamma=args.gamma, focal_alpha=args.alpha,
                          warmup_uu=args.warmup_uu, warmup_tc=args.warmup_tc,
                          seed=args.seed)


def cmd_train(args) -> None:
    x = cb.load_cube(args.t1)
    y = cb.load_cube(args.t2)
    em = em_mod.load_endmembers(args.endmembers)
    labels = pd.load_pseudo_labels(args.labels)
    cfg = _train_cfg_from(args)
    result = md.train(x, y, em, labels, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    md.save_checkpoint(out / "checkpoint", result)
    md.write_train_log(out / "train_log.txt", result.log)
    rp.fig_training_curves(result.log, out / "train_curves.png")


def cmd_infer(args) -> None:
    x = cb.load_cube(args.t1)
    y = cb.load_cube(args.t2)
    em = em_mod.load_endmembers(args.endmembers)
    uu, tc, model_cfg = md.load_checkpoint(args.checkpoint)
    prob, a1, a2 = md.infer_change_prob(uu, tc, x, y, em, model_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cb.write_container(out / "prob", prob[:, :, None], "f32le", {"role": "probability"})
    cb.save_abundance(a1, out / "abund_t1")
    cb.save_abundance(a2, out / "abund_t2")


def cmd_evaluate(args) -> None:
    pred_dir = Path(args.pred_dir)
    ref_dir = Path(args.ref_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    prob, _ = cb.read_container(pred_dir / "prob")
    a1 = cb.load_abundance(pred_dir / "abund_t1")
    a2 = cb.load_abundance(pred_dir / "abund_t2")
    binary_ref = cb.load_map(ref_dir / "binary_ref")
    multi_ref = cb.load_map(ref_dir / "multiclass_ref")

    binary_pred = cm.binarize(prob[:, :, 0])
    multi_raw = cm.multiclass_from_abundance(a1, a2, binary_pred)
    multi_pred, report = cm.match_classes_to_reference(multi_raw, multi_ref)

    b_oa, b_k = pl.score_binary(binary_pred, binary_ref)
    m_oa, m_k = pl.score_multiclass(multi_pred, multi_ref)
    values = {"binary_oa": f"{b_oa:.6f}", "binary_kappa": f"{b_k:.6f}",
              "multi_oa": f"{m_oa:.6f}", "multi_kappa": f"{m_k:.6f}"}

    truth_t1 = ref_dir / "truth_abund_t1.hdr"
    if truth_t1.exists() and a1.k == cb.load_abundance(ref_dir / "truth_abund_t1").k:
        em_est = em_mod.load_endmembers(pred_dir.parent / "endmembers" / "endmembers") \
            if (pred_dir.parent / "endmembers" / "endmembers.hdr").exists() else None
        if em_est is not None:
            em_true = em_mod.load_endmembers(ref_dir / "endmembers_true")
            perm = pl.align_endmembers_to_truth(em_est, em_true.signatures)
            from .metrics import abundance_mse
            _, mse1 = abundance_mse(pl.aligned_abundance(a1, perm),
                                    cb.load_abundance(ref_dir / "truth_abund_t1"))
            _, mse2 = abundance_mse(pl.aligned_abundance(a2, perm),
                                    cb.load_abundance(ref_dir / "truth_abund_t2"))
            values["mse_t1"] = f"{mse1:.6e}"
            values["mse_t2"] = f"{mse2:.6e}"

    (out / "metrics.txt").write_text(pl.metrics_text(values))
    (out / "metrics.csv").write_text(
        ",".join(values) + "\n" + ",".join(str(v) for v in values.values()) + "\n")
    cb.save_map(binary_pred, out / "binary_pred")
    cb.save_map(multi_pred, out / "multiclass_pred")
    (out / "match_report.txt").write_text("\n".join(report.lines()) + "\n")
    rp.render_map(binary_pred, out / "binary_pred.pgm", binary=True)
    rp.render_map(multi_pred, out / "multiclass_pred.ppm", binary=False)
    rp.fig_change_map(binary_pred, out / "binary_pred.png", "binary change")
    rp.fig_change_map(multi_pred, out / "multiclass_pred.png", "multiclass change")


def cmd_compare(args) -> None:
    scene = _load_scene_dir(Path(args.scene_dir))
    cfg = _train_cfg_from(args)
    artifacts = pl.compare_methods(scene, cfg, args.n_unchanged, args.n_changed,
                                   k_override=args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.csv").write_text(pl.scores_csv(artifacts.scores))
    flat: dict[str, str] = {}
    for s in artifacts.scores:
        for key, val in s.as_dict().items():
            if key != "method":
                flat[f"{s.method}.{key}"] = f"{val:.6g}"
    (out / "metrics.txt").write_text(pl.metrics_text(flat))
    for name, cmap_obj in artifacts.maps.items():
        binary = name.endswith("binary")
        suffix = ".pgm" if binary else ".ppm"
        rp.render_map(cmap_obj, out / f"{name}{suffix}", binary=binary)
    rp.fig_method_trend([s.as_dict() for s in artifacts.scores], out / "trend.png")
    for method, log in artifacts.train_logs.items():
        md.write_train_log(out / f"{method}_log.txt", log)


def cmd_render(args) -> None:
    cmap_obj = cb.load_map(args.map)
    binary = {"binary": True, "multi": False, "auto": None}[args.kind]
    rp.render_map(cmap_obj, args.out, binary=binary)
    if args.png:
        rp.fig_change_map(cmap_obj, args.png)


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "endmembers": cmd_endmembers,
    "unmix-fcls": cmd_unmix_fcls,
    "predetect": cmd_predetect,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "render": cmd_render,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        _COMMANDS[args.command](args)
    except Exception as exc:  # data errors: bad files, shape mismatches, infeasible configs
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
