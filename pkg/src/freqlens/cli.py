"""Command-line surface.

Subcommands:

* ``spectrum``      -- images -> FLSG grids + preview PNGs
* ``pretrain``      -- train the toy masked autoencoder from a JSON config
* ``reconstruct``   -- run a checkpoint on one image, emit recon/diff/mask + case table
* ``scale-factors`` -- expected-loss table as JSON
* ``rho``           -- separation-index report from feature CSVs (+ optional scatter SVG)
* ``mmd``           -- unbiased MMD^2 between two feature CSVs
* ``corr``          -- Pearson r + p-value between two numeric CSV columns

Exit codes: 0 success, 1 usage/config error before any work, 2 partial
failure.  Every command echoes its resolved configuration into its
output metadata.  ``FREQLENS_THREADS`` caps per-file parallelism.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, freqloss, masking, separation, spectra, specstats, toymae
from .rng import STREAM_MASK, STREAM_MODEL_INIT, substream

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class UsageError(Exception):
    """Config/usage problem detected before any work started."""


def _thread_cap() -> int:
    raw = os.environ.get("FREQLENS_THREADS", "")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    return max(1, cap) if cap > 0 else min(4, os.cpu_count() or 1)


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _parse_levels(text: str) -> list[float]:
    try:
        levels = [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad --levels value: {text}") from exc
    if not levels:
        raise UsageError("--levels must name at least one ratio")
    for r in levels:
        if not 0.0 <= r < 1.0:
            raise UsageError(f"ratio level must lie in [0, 1), got {r}")
    return levels


# --------------------------------------------------------------------------
# spectrum
# --------------------------------------------------------------------------


def _collect_images(inputs: list[str]) -> list[Path]:
    files: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            files.append(p)
    return files


def cmd_spectrum(args) -> int:
    files = _collect_images(args.inputs)
    if not files:
        raise UsageError("no input images given")
    if args.side <= 0 or args.side % args.patch != 0 or (args.side // args.patch) % 2 != 0:
        raise UsageError("side must be a positive multiple of patch with an even patch count")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(path: Path) -> tuple[str, str | None]:
        try:
            image = spectra.load_image(path)
            grid = spectra.magnitude_spectrum(image, side=args.side, crop=args.crop)
            stored = grid if args.raw else spectra.normalize_grid(grid)
            spectra.write_flsg(stored, out_dir / f"{path.stem}.flsg")
            spectra.write_grid_png(grid, out_dir / f"{path.stem}.png")
            return str(path), None
        except Exception as exc:  # noqa: BLE001 - per-file diagnostics, keep going
            return str(path), str(exc)

    results: list[tuple[str, str | None]] = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=_thread_cap()) as pool:
        for name, error in pool.map(work, files):
            results.append((name, error))
            if error is not None:
                print(f"freqlens spectrum: {name}: {error}", file=sys.stderr)

    meta = {
        "command": "spectrum",
        "config": {
            "inputs": [str(f) for f in files],
            "out": str(out_dir),
            "side": args.side,
            "patch": args.patch,
            "crop": args.crop,
            "raw": args.raw,
        },
        "failures": [{"input": n, "error": e} for n, e in results if e is not None],
    }
    (out_dir / "spectrum_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return 2 if meta["failures"] else 0


# --------------------------------------------------------------------------
# pretrain
# --------------------------------------------------------------------------

_CONFIG_KEYS = {
    "version", "seed", "epochs", "lr", "side", "patch", "embed_dim", "levels",
    "gamma", "variant", "coefficient_mode", "clamp_eps", "block_norm",
    "objective", "k", "lambda", "data", "out_dir",
}
_DATA_KEYS = {"kind", "count", "dir"}

_CONFIG_DEFAULTS = {
    "seed": 0,
    "epochs": 1,
    "lr": 0.15,
    "side": 64,
    "patch": 8,
    "embed_dim": 64,
    "levels": [0.3, 0.15, 0.0],
    "gamma": 2.0,
    "variant": "complement",
    "coefficient_mode": "derived",
    "clamp_eps": 1e-6,
    "block_norm": "mean",
    "objective": "scaled",
    "k": None,
    "lambda": 0.0,
    "out_dir": "pretrain_out",
}


def _load_pretrain_config(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if raw.get("version") != 1:
        raise UsageError("config must declare \"version\": 1")
    if "data" not in raw:
        raise UsageError("config needs a \"data\" section")
    data = raw["data"]
    if not isinstance(data, dict) or set(data) - _DATA_KEYS:
        raise UsageError(f"data section allows keys {sorted(_DATA_KEYS)}")
    kind = data.get("kind")
    if kind == "synthetic":
        if not isinstance(data.get("count"), int) or data["count"] < 1:
            raise UsageError("synthetic data needs a positive integer \"count\"")
    elif kind == "images":
        if not data.get("dir") or not Path(data["dir"]).is_dir():
            raise UsageError("images data needs an existing \"dir\"")
        if not _collect_images([data["dir"]]):
            raise UsageError(f"dataset dir {data['dir']} holds no images")
    else:
        raise UsageError("data.kind must be \"synthetic\" or \"images\"")

    cfg = dict(_CONFIG_DEFAULTS)
    cfg.update(raw)
    if cfg["side"] % cfg["patch"] != 0 or (cfg["side"] // cfg["patch"]) % 2 != 0:
        raise UsageError("side must be a multiple of patch with an even patch count")
    if cfg["k"] is None:
        cfg["k"] = cfg["patch"] ** 2
    return cfg


def _pretrain_dataset(cfg: dict) -> list[spectra.MagnitudeGrid]:
    data = cfg["data"]
    if data["kind"] == "synthetic":
        return toymae.synthetic_spectra(data["count"], cfg["side"], seed=cfg["seed"])
    grids = []
    for path in _collect_images([data["dir"]]):
        image = spectra.load_image(path)
        grids.append(spectra.magnitude_spectrum(image, side=cfg["side"]))
    return grids


def cmd_pretrain(args) -> int:
    cfg = _load_pretrain_config(args.config)
    out_dir = Path(args.out or cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    loss_cfg = freqloss.LossConfig(
        gamma=cfg["gamma"], clamp_eps=cfg["clamp_eps"], variant=cfg["variant"],
        coefficient_mode=cfg["coefficient_mode"], block_norm=cfg["block_norm"],
    )
    chi2 = specstats.Chi2Spec(k=float(cfg["k"]), lambda_nc=float(cfg["lambda"]))
    table = specstats.build_scaling_table(cfg["levels"], chi2, cfg["gamma"], loss_cfg)

    dataset = _pretrain_dataset(cfg)
    n = cfg["side"] // cfg["patch"]
    model = toymae.init_model(n, cfg["patch"], cfg["embed_dim"],
                              substream(cfg["seed"], STREAM_MODEL_INIT))
    state = toymae.TrainState(
        model=model, lr=cfg["lr"], seed=cfg["seed"],
        schedule=masking.RatioSchedule(levels=tuple(cfg["levels"]), seed=cfg["seed"]),
        cfg=loss_cfg, table=table, objective=cfg["objective"],
    )
    state, trace = toymae.train(state, dataset, cfg["epochs"])

    checkpoint = out_dir / "checkpoint.ffit"
    toymae.save_checkpoint(state.model, checkpoint)
    freqloss.write_loss_trace(out_dir / "trace.csv", trace)
    if args.plot:
        from . import plots

        plots.loss_curve(trace, out_dir / "trace.svg")

    config_hash = hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode("utf-8")
    ).hexdigest()
    meta = {
        "command": "pretrain",
        "config": cfg,
        "config_sha256": config_hash,
        "steps": state.step,
        "scaling_table": json.loads(table.to_json()),
        "checkpoint": str(checkpoint),
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return 0


# --------------------------------------------------------------------------
# reconstruct
# --------------------------------------------------------------------------


def cmd_reconstruct(args) -> int:
    try:
        model = toymae.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from exc
    if not 0.0 <= args.ratio < 1.0:
        raise UsageError("--ratio must lie in [0, 1)")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    side = model.n * model.w
    image_path = Path(args.image)
    if image_path.suffix.lower() == ".flsg":
        grid = spectra.read_flsg(image_path)
        if grid.side != side:
            raise UsageError(f"grid side {grid.side} does not match checkpoint side {side}")
    else:
        grid = spectra.magnitude_spectrum(spectra.load_image(image_path), side=side)
    grid = spectra.normalize_grid(grid)
    patches = spectra.patchify(grid, model.w)

    if args.ratio > 0.0:
        plan = masking.sample_mask(model.n, args.ratio,
                                   substream(args.seed, STREAM_MASK, 0))
    else:
        plan = masking.full_visible_plan(model.n)
    recon = toymae.forward(model, patches, plan)
    recon_values = np.clip(spectra.unpatchify(recon), 0.0, 1.0)
    diff = np.abs(recon_values - grid.values)

    Image.fromarray(np.round(recon_values * 255.0).astype(np.uint8), mode="L").save(
        out_dir / "reconstruction.png"
    )
    Image.fromarray(np.round(np.clip(diff, 0.0, 1.0) * 255.0).astype(np.uint8), mode="L").save(
        out_dir / "difference.png"
    )
    masking.write_mask_png(plan, out_dir / "mask.png", cell=model.w)

    per_block = freqloss.block_losses(patches, recon, norm="mean")
    case_errors = {}
    for case, key in ((1, "e1"), (2, "e2"), (3, "e3")):
        sel = plan.case_of == case
        case_errors[key] = float(per_block[sel].mean()) if sel.any() else None
    plan0 = masking.full_visible_plan(model.n)
    per_block0 = freqloss.block_losses(patches, toymae.forward(model, patches, plan0), norm="mean")
    case_errors["e_global"] = float(per_block0.mean())

    payload = {
        **case_errors,
        "meta": {
            "command": "reconstruct",
            "config": {
                "checkpoint": str(args.checkpoint),
                "image": str(args.image),
                "ratio": args.ratio,
                "seed": args.seed,
                "out": str(out_dir),
            },
        },
    }
    _emit(payload, str(out_dir / "case_errors.json"))
    return 0


# --------------------------------------------------------------------------
# scale-factors
# --------------------------------------------------------------------------


def cmd_scale_factors(args) -> int:
    levels = _parse_levels(args.levels)
    if args.estimate_from is not None:
        try:
            sample = np.loadtxt(args.estimate_from, ndmin=1)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read block-loss sample: {exc}") from exc
        chi2 = specstats.estimate_chi2_spec(sample, k_fixed=args.k)
    else:
        chi2 = specstats.Chi2Spec(k=args.k, lambda_nc=getattr(args, "lambda"))
    loss_cfg = freqloss.LossConfig(
        gamma=args.gamma, clamp_eps=args.clamp_eps, variant=args.variant,
        coefficient_mode=args.mode,
    )
    try:
        table = specstats.build_scaling_table(levels, chi2, args.gamma, loss_cfg)
    except ArithmeticError as exc:
        print(f"freqlens scale-factors: {exc}", file=sys.stderr)
        return 1
    payload = json.loads(table.to_json())
    payload["meta"] = {
        "command": "scale-factors",
        "config": {
            "levels": levels, "gamma": args.gamma, "k": args.k,
            "lambda": chi2.lambda_nc, "mode": args.mode, "variant": args.variant,
            "clamp_eps": args.clamp_eps,
            "estimate_from": args.estimate_from,
        },
    }
    _emit(payload, args.out)
    return 0


# --------------------------------------------------------------------------
# rho
# --------------------------------------------------------------------------


def cmd_rho(args) -> int:
    try:
        fs = separation.load_feature_csv(args.features)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc

    fit_rows = np.arange(fs.n)
    if args.no_unseen_in_fit:
        keep = [i for i in range(fs.n)
                if not (fs.labels[i] == 1 and str(fs.clusters[i]) == separation.UNSEEN_TAG)]
        fit_rows = np.asarray(keep, dtype=int)
    fit_fs = fs.restrict(fit_rows)
    if len(fit_fs.training_cluster_tags()) < 2:
        raise UsageError("separation index needs at least 2 fake training clusters")

    lam = None if args.lam == "auto" else float(args.lam)
    fit = separation.fit_robust(fit_fs, lam=lam, solver=args.solver,
                                kept_fraction=args.kept_fraction, t0=args.t0)

    report_fs = fs
    if args.no_unseen_in_denominator:
        keep = [i for i in range(fs.n)
                if not (fs.labels[i] == 1 and str(fs.clusters[i]) == separation.UNSEEN_TAG)]
        report_fs = fs.restrict(np.asarray(keep, dtype=int))
    report = separation.rho_index(report_fs, fit)

    payload = report.to_dict()
    payload["meta"] = {
        "command": "rho",
        "config": {
            "features": [str(f) for f in args.features],
            "lam": args.lam,
            "solver": args.solver,
            "t0": args.t0,
            "kept_fraction": args.kept_fraction,
            "unseen_in_fit": not args.no_unseen_in_fit,
            "unseen_in_denominator": not args.no_unseen_in_denominator,
            "plot": args.plot,
        },
    }
    _emit(payload, args.out)
    if args.plot:
        from . import plots

        plots.pca_scatter(fs, args.plot)
    return 0


# --------------------------------------------------------------------------
# mmd / corr
# --------------------------------------------------------------------------


def cmd_mmd(args) -> int:
    try:
        fa = separation.load_feature_csv([args.a])
        fb = separation.load_feature_csv([args.b])
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if fa.d != fb.d:
        raise UsageError(f"feature dimension mismatch: {args.a} has d={fa.d}, {args.b} has d={fb.d}")
    bandwidth = specstats.median_bandwidth(np.vstack([fa.features, fb.features]))
    value = specstats.mmd(fa.features, fb.features, bandwidth=bandwidth)
    payload = {
        "mmd2": value,
        "bandwidth": bandwidth,
        "meta": {"command": "mmd", "config": {"a": str(args.a), "b": str(args.b)}},
    }
    _emit(payload, args.out)
    return 0


def _load_numeric_csv(path: str) -> np.ndarray:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        import csv as _csv

        for i, row in enumerate(_csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue  # header row
                raise
    if not rows:
        raise UsageError(f"{path}: no numeric rows")
    return np.asarray(rows)


def cmd_corr(args) -> int:
    try:
        table = _load_numeric_csv(args.csv)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read {args.csv}: {exc}") from exc
    if max(args.x_col, args.y_col) >= table.shape[1]:
        raise UsageError(f"{args.csv} has only {table.shape[1]} columns")
    try:
        r, p = specstats.pearson(table[:, args.x_col], table[:, args.y_col])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    payload = {
        "r": r,
        "p": p,
        "n": int(table.shape[0]),
        "meta": {
            "command": "corr",
            "config": {"csv": str(args.csv), "x_col": args.x_col, "y_col": args.y_col},
        },
    }
    _emit(payload, args.out)
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freqlens",
                                     description="Masked-spectrum losses and separation metrics")
    parser.add_argument("--version", action="version", version=f"freqlens {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrum", help="convert images to magnitude-spectrum grids")
    p.add_argument("inputs", nargs="*", help="image files or directories")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--side", type=int, default=224)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--crop", action="store_true", help="resize-then-center-crop instead of direct resize")
    p.add_argument("--raw", action="store_true", help="store unnormalized log magnitudes in FLSG")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("pretrain", help="train the toy masked autoencoder")
    p.add_argument("--config", required=True, help="JSON config path")
    p.add_argument("--out", default=None, help="output directory (overrides config out_dir)")
    p.add_argument("--plot", action="store_true", help="also write a loss-curve figure")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("reconstruct", help="reconstruct one image through a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="image file or .flsg grid")
    p.add_argument("--ratio", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("scale-factors", help="expected-loss scaling table as JSON")
    p.add_argument("--levels", default="0.3,0.15,0.0")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--k", type=float, default=256.0)
    p.add_argument("--lambda", type=float, default=0.0, dest="lambda")
    p.add_argument("--estimate-from", default=None,
                   help="text file of raw block losses for the noncentrality estimate")
    p.add_argument("--mode", choices=freqloss.COEFFICIENT_MODES, default="derived")
    p.add_argument("--variant", choices=freqloss.VARIANTS, default="complement")
    p.add_argument("--clamp-eps", type=float, default=1e-6)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_scale_factors)

    p = sub.add_parser("rho", help="real/fake separation index from feature CSVs")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--lam", default="auto", help="l1 penalty or 'auto'")
    p.add_argument("--solver", choices=separation.SOLVERS, default="cd")
    p.add_argument("--t0", type=float, default=0.5)
    p.add_argument("--kept-fraction", type=float, default=0.8)
    p.add_argument("--no-unseen-in-fit", action="store_true")
    p.add_argument("--no-unseen-in-denominator", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--plot", default=None, help="write a PCA scatter SVG to this path")
    p.set_defaults(func=cmd_rho)

    p = sub.add_parser("mmd", help="unbiased MMD^2 between two feature CSVs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_mmd)

    p = sub.add_parser("corr", help="Pearson correlation between two CSV columns")
    p.add_argument("--csv", required=True)
    p.add_argument("--x-col", type=int, default=0)
    p.add_argument("--y-col", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_corr)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to the exit-code contract
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"freqlens {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"freqlens {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
