"""Command-line entry points: phantom, simulate, reconstruct, reference, evaluate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, evaluation, forward, optimizer, phantom, reference, storage
from .config import RunConfig, load_config
from .core import (
    ConfigError,
    ConstraintError,
    DataError,
    DimensionError,
    MeasuredDataset,
    Mode,
    NumericalError,
    ResourceError,
)

log = logging.getLogger("multislice_tomo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

PHANTOM_FILE = "phantom.h5"
DATASET_FILE = "dataset.h5"
RECON_FILE = "reconstruction.h5"
REFERENCE_FILE = "reference.h5"
CHECKPOINT_DIR = "checkpoints"


def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(args) -> RunConfig:
    overrides = {"seed": args.seed, "output_dir": args.output_dir}
    cfg = load_config(args.config, overrides)
    if getattr(args, "workers", None):
        cfg.reconstruction.n_workers = args.workers
    return cfg


def cmd_phantom(args) -> int:
    cfg = _load(args)
    p = cfg.phantom
    mats = cfg.materials_dict()
    if p.kind == "cone":
        vol, labels = phantom.make_cone_phantom(p.n, p.voxel_nm, mats, cfg.seed, p.wall_thickness_px,
                                                p.n_outer, p.n_inner, p.n_grains)
    else:
        vol = phantom.make_sphere_phantom(p.n, p.sphere_radius_px, mats["body"], p.voxel_nm)
        labels = (vol.delta > 0).astype(np.uint8)
    path = _out(cfg) / PHANTOM_FILE
    storage.write_phantom(path, vol, labels, cfg.dump())
    print(f"wrote {path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _out(cfg)
    vol, labels = storage.read_phantom(out / PHANTOM_FILE)
    geom = cfg.experiment_geometry()
    if vol.shape[0] != cfg.phantom.n:
        raise DataError(f"phantom has N={vol.shape[0]} but the config says {cfg.phantom.n}")
    probe = cfg.probe()
    frames = forward.simulate_intensities(vol, geom, probe)
    meta = {"source": "simulate"}
    if probe is not None:
        meta.update(scan_n_side=cfg.geometry.scan.n_side, scan_spacing_px=cfg.phantom.n // cfg.geometry.scan.n_side)
    ds = MeasuredDataset(frames, geom, metadata=meta)
    if cfg.noise.n_ph is not None:
        sigma = cfg.noise.sigma_aor
        if sigma is None:
            sigma = phantom.aor(phantom.blurred_support(vol.delta > 0))
        ds = phantom.apply_poisson_noise(ds, cfg.noise.n_ph, sigma, cfg.noise.seed)
    path = out / DATASET_FILE
    storage.write_dataset(path, ds, probe, cfg.dump())
    print(f"wrote {path}: {geom.n_angles} angles x {geom.n_positions} positions")
    return EXIT_OK


def _latest_checkpoint(out: Path):
    files = sorted((out / CHECKPOINT_DIR).glob("level*_epoch*.h5"))
    if not files:
        raise DataError(f"no checkpoints under {out / CHECKPOINT_DIR}")
    # names sort coarse-to-fine descending level; pick the most advanced state
    def key(p):
        level, epoch = p.stem.replace("level", "").split("_epoch")
        return (-int(level), int(epoch))

    return max(files, key=key)


def write_loss_csv(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["level", "epoch", "update", "angles", "fidelity", "l1_delta", "l1_beta", "tv", "total"])
        for h in history:
            lb = h.loss
            w.writerow([h.level, h.epoch, h.update, " ".join(map(str, h.angles)),
                        repr(lb.fidelity), repr(lb.l1_delta), repr(lb.l1_beta), repr(lb.tv), repr(lb.total)])


def write_slices_png(path, vol, title=""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = vol.shape[0]
    c = n // 2
    views = [("z (beam) slice", vol.delta[c]), ("y (axis) slice", vol.delta[:, c]), ("x slice", vol.delta[:, :, c])]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
    vmax = float(vol.delta.max()) or 1.0
    for ax, (name, img) in zip(axes, views):
        im = ax.imshow(img, cmap="gray", vmin=0, vmax=vmax)
        ax.set_title(name)
        ax.axis("off")
    fig.colorbar(im, ax=axes, shrink=0.8, label="delta")
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_reconstruct(args) -> int:
    cfg = _load(args)
    out = _out(cfg)
    ds, probe = storage.read_dataset(out / DATASET_FILE)
    mode = ds.geometry.mode
    rcfg = cfg.recon_config(mode, n_workers=args.workers)
    text = cfg.dump()
    resume = None
    if args.resume is not None:
        ck = _latest_checkpoint(out) if args.resume == "latest" else Path(args.resume)
        resume = storage.read_checkpoint(ck)
        print(f"resuming from {ck} (level {resume.level}, epoch {resume.epoch})")

    # recomputed on resume too: later levels intersect their support with this full-grid mask
    support0 = None
    if rcfg.use_support and mode is Mode.FULLFIELD and cfg.reconstruction.support.source == "paganin":
        s = cfg.reconstruction.support
        support0 = reference.init_support(ds, cfg.delta_over_beta(), s.sigma_px, s.threshold_fraction)

    ckdir = out / CHECKPOINT_DIR

    def on_epoch(state):
        storage.write_checkpoint(ckdir / f"level{state.level}_epoch{state.epoch:03d}.h5", state, text)
        write_loss_csv(out / "loss.csv", state.history)

    try:
        result = optimizer.reconstruct(ds, rcfg, support0, probe, resume=resume, on_epoch=on_epoch)
    except NumericalError as err:
        if err.state is not None:
            storage.write_checkpoint(ckdir / "diverged_last_finite.h5", err.state, text)
        raise
    storage.write_volume(out / RECON_FILE, result.volume, result.support, text,
                         extra={"epochs_per_level": np.asarray(result.epochs_per_level)})
    write_loss_csv(out / "loss.csv", result.history)
    write_slices_png(out / "reconstruction_slices.png", result.volume, "reconstruction")
    print(f"wrote {out / RECON_FILE}; epochs per level {result.epochs_per_level}")
    return EXIT_OK


def cmd_reference(args) -> int:
    cfg = _load(args)
    out = _out(cfg)
    ds, _ = storage.read_dataset(out / DATASET_FILE)
    if ds.geometry.mode is not Mode.FULLFIELD:
        raise ConfigError("reference needs a full-field dataset")
    s = cfg.reconstruction.support
    vol = reference.pure_projection_reconstruct(ds, cfg.delta_over_beta(), n_iter=cfg.reference.n_iter,
                                                sigma_px=s.sigma_px, threshold_fraction=s.threshold_fraction)
    storage.write_volume(out / REFERENCE_FILE, vol, None, cfg.dump())
    write_slices_png(out / "reference_slices.png", vol, "ER + FBP")
    print(f"wrote {out / REFERENCE_FILE}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    a = storage.read_volume(args.volume_a)
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.volume_b:
        b = storage.read_volume(args.volume_b)
        curve = evaluation.fsc(a.delta, b.delta, args.shells)
        with open(out / "fsc.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["shell_freq", "correlation", "shell_count"])
            for r in zip(curve.shell_freqs, curve.correlations, curve.shell_counts):
                w.writerow([repr(float(r[0])), repr(float(r[1])), int(r[2])])
        res = evaluation.fsc_resolution(curve, args.threshold)
        rows.append(("fsc_resolution", res))
        rows.append(("fsc_mean", curve.mean()))
        print(f"FSC-{args.threshold} resolution: {res:.4f} of Nyquist (mean FSC {curve.mean():.4f})")
    if args.truth:
        truth, _ = storage.read_phantom(args.truth)
        mask = phantom.object_support(truth)
        for name, path in (("a", args.volume_a), ("b", args.volume_b)):
            if path is None:
                continue
            vol = a if name == "a" else storage.read_volume(path)
            err, frac = evaluation.support_rmse(vol, truth, mask)
            rows.append((f"rmse_{name}", err))
            rows.append((f"rmse_fraction_{name}", frac))
            print(f"volume {name}: delta RMSE in support {err:.4g} ({100 * frac:.2f}% of peak)")
    with open(out / "evaluation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerows((k, repr(float(v))) for k, v in rows)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="multislice-tomo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=False):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--output-dir", help="override the config output directory")
        if workers:
            p.add_argument("--workers", type=int, help="gradient worker threads")

    common(sub.add_parser("phantom", help="build the synthetic specimen"))
    common(sub.add_parser("simulate", help="simulate (noisy) measurements of the phantom"))
    p = sub.add_parser("reconstruct", help="multislice reconstruction")
    common(p, workers=True)
    p.add_argument("--resume", nargs="?", const="latest",
                   help="resume from a checkpoint file (default: latest in the output directory)")
    common(sub.add_parser("reference", help="ER + FBP baseline reconstruction"))
    p = sub.add_parser("evaluate", help="FSC and RMSE report")
    p.add_argument("volume_a")
    p.add_argument("volume_b", nargs="?")
    p.add_argument("--truth", help="phantom file for RMSE against ground truth")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--shells", type=int)
    p.add_argument("--output-dir")
    return parser


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "reference": cmd_reference,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DimensionError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ConstraintError, ResourceError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
