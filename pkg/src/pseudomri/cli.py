"""Command-line entry point: gen-data, train-ae, train-diff, infer, eval, interp-study.

Exit codes: 0 success, 2 usage error or missing input, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics as M
from . import pipeline as P
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import (ChecksumError, DatasetManifest, RegionSpec, Volume, generate_phantom_dataset, load_dataset,
                   load_sample, read_tensor, write_tensor)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("pseudomri")


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config file (overrides the preset)")
    p.add_argument("--preset", choices=["desk-scale", "paper-scale"], help="base preset (default desk-scale)")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--workers", type=int, help="parallel slice workers for inference")
    p.add_argument("--out", help="output root (overrides $PSEUDOMRI_OUTPUT_ROOT and the config)")
    p.add_argument("-q", "--quiet", action="store_true", help="do not print the resolved config")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="pseudomri", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a phantom dataset")
    p.add_argument("--n", type=int, help="number of phantom pairs")

    for name, what in (("train-ae", "autoencoder"), ("train-diff", "diffusion stage")):
        p = sub.add_parser(name, parents=[common], help=f"train the {what}")
        p.add_argument("--steps", type=int, help="total optimizer steps")
        p.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")

    p = sub.add_parser("infer", parents=[common], help="generate a volume from a radiograph")
    _add_input_args(p)
    p.add_argument("--s", type=int, help="number of slices")
    p.add_argument("--steps", type=int, help="DDIM steps")
    p.add_argument("--shared-noise", action="store_true", help="reuse one starting latent for every slice")

    p = sub.add_parser("eval", parents=[common], help="score a generated volume against ground truth")
    p.add_argument("--pred", required=True, help="predicted volume tensor file or inference directory")
    p.add_argument("--gt", required=True, help="ground-truth volume tensor file or dataset sample id")
    p.add_argument("--region", type=int, nargs=4, metavar=("ROW0", "ROW1", "COL0", "COL1"))

    p = sub.add_parser("interp-study", parents=[common], help="adjacent-slice correlation versus slice count")
    _add_input_args(p)
    p.add_argument("--s-list", type=int, nargs="+", help="slice counts to generate")
    p.add_argument("--steps", type=int, help="DDIM steps")
    return parser


def _add_input_args(p):
    p.add_argument("--sample", help="dataset sample id (default: first validation sample)")
    p.add_argument("--xray", help="radiograph tensor file (raw float32 + .json sidecar)")
    p.add_argument("--grade", type=int, help="KOA grade for label mode when --xray is used")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _resolve(args) -> RunConfig:
    overrides = {"seed": args.seed, "infer.workers": args.workers, "paths.output_root": args.out}
    for attr, key in (("n", "data.n"), ("s", "infer.s"), ("s_list", "infer.s_list")):
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    if getattr(args, "steps", None) is not None:
        key = {"train-ae": "train.ae_steps", "train-diff": "train.diff_steps"}.get(args.command, "infer.steps")
        overrides[key] = args.steps
    if getattr(args, "shared_noise", False):
        overrides["infer.shared_noise"] = True
    cfg = load_config(args.config, args.preset, overrides)
    if not args.quiet:
        print("# resolved config")
        print(cfg.to_json())
    return cfg


def _write_config(cfg: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(cfg.to_json())


def _manifest(cfg: RunConfig) -> DatasetManifest:
    path = cfg.paths.resolve("dataset")
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {path} (run gen-data first)")
    return DatasetManifest.load(path)


def _train_samples(cfg: RunConfig):
    m = _manifest(cfg)
    split = "train" if m.ids("train") else None
    samples = list(load_dataset(m, split))
    if not samples:
        raise UsageError("dataset has no training samples")
    if samples[0].volume.slices.shape[-1] != cfg.autoencoder.input_resolution:
        raise UsageError("dataset resolution does not match the autoencoder config")
    return samples


def _load_bundle(path: Path, what: str) -> P.ModelBundle:
    if not path.exists():
        raise FileNotFoundError(f"missing {what} checkpoint {path}")
    return P.ModelBundle.load(path)


def _input(cfg: RunConfig, args):
    """``(name, xray, grade, ground-truth volume or None, region or None)``."""
    if args.xray:
        xray = read_tensor(args.xray)
        return Path(args.xray).stem, xray, args.grade, None, None
    m = _manifest(cfg)
    if args.sample:
        entries = [e for e in m.samples if e.id == args.sample]
        if not entries:
            raise UsageError(f"no sample {args.sample!r} in {m.root}")
        entry = entries[0]
    else:
        val = [e for e in m.samples if e.split == "val"]
        entry = (val or m.samples)[0]
    s = load_sample(m, entry)
    return s.id, s.xray, s.grade if args.grade is None else args.grade, s.volume, s.region


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    if cfg.data.n < 1:
        raise UsageError("--n must be at least 1")
    root = cfg.paths.resolve("dataset")
    m = generate_phantom_dataset(cfg.data.n, root, cfg.data.phantom, cfg.seed, cfg.data.split_ratio)
    m.extra["config"] = cfg.to_dict()
    m.save()
    print(f"wrote {len(m.samples)} phantom pairs to {root}")
    if m.split:
        print(f"split: {m.split['train']} train / {m.split['val']} val")
    return EXIT_OK


def _checkpointer(path: Path):
    def save(bundle):
        bundle.save(path)
    return save


def cmd_train_ae(cfg: RunConfig, args) -> int:
    samples = _train_samples(cfg)
    path = cfg.paths.resolve("ae_checkpoint")
    if args.resume and path.exists():
        bundle = P.ModelBundle.load(path)
        bundle.cfg = _carry_architecture(cfg, bundle.cfg)
        print(f"resuming from step {bundle.meta.get('ae_step', 0)}")
    else:
        bundle = P.ModelBundle.create(cfg)
    bundle, report = P.train_autoencoder(samples, bundle, cfg.train.ae_steps, _checkpointer(path))
    bundle.save(path)
    out = path.parent
    report.to_csv(out / "ae_report.csv")
    _write_config(cfg, out)
    last = report.rows[-1] if report.rows else {}
    print(f"autoencoder: {bundle.meta['ae_step']} steps, L_rec {last.get('l_rec', float('nan')):.5f}, "
          f"{report.wallclock:.1f}s; checkpoint {path}")
    return EXIT_OK


def _carry_architecture(cfg: RunConfig, saved: RunConfig) -> RunConfig:
    """Current run settings with the model architecture fixed by the checkpoint."""
    if cfg.autoencoder != saved.autoencoder:
        print("note: autoencoder architecture taken from the checkpoint")
    cfg.autoencoder = saved.autoencoder
    return cfg


def cmd_train_diff(cfg: RunConfig, args) -> int:
    samples = _train_samples(cfg)
    diff_path = cfg.paths.resolve("diff_checkpoint")
    if args.resume and diff_path.exists():
        bundle = P.ModelBundle.load(diff_path)
        print(f"resuming from step {bundle.meta.get('diff_step', 0)}")
    else:
        bundle = _load_bundle(cfg.paths.resolve("ae_checkpoint"), "autoencoder")
        bundle.optim.pop("opt_ae", None)
    saved = bundle.cfg
    bundle.cfg = _carry_architecture(cfg, saved)
    if bundle.denoiser is not None:
        bundle.cfg.unet, bundle.cfg.cond_encoder = saved.unet, saved.cond_encoder
    bundle, report = P.train_diffusion(samples, bundle, cfg.train.diff_steps, _checkpointer(diff_path))
    bundle.save(diff_path)
    out = diff_path.parent
    report.to_csv(out / "diff_report.csv")
    _write_config(bundle.cfg, out)
    print(f"autoencoder freeze check: before {report.notes['ae_hash_before'][:16]} "
          f"after {report.notes['ae_hash_after'][:16]} "
          f"({'unchanged' if report.notes['ae_hash_before'] == report.notes['ae_hash_after'] else 'CHANGED'})")
    if "classifier_accuracy" in bundle.meta:
        print(f"classifier training accuracy {bundle.meta['classifier_accuracy']:.3f}")
    last = report.rows[-1] if report.rows else {}
    print(f"diffusion: {bundle.meta['diff_step']} steps, L_diff {last.get('l_diff', float('nan')):.5f}, "
          f"{report.wallclock:.1f}s; checkpoint {diff_path}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, args) -> int:
    bundle = _load_bundle(cfg.paths.resolve("diff_checkpoint"), "diffusion")
    name, xray, grade, _, _ = _input(cfg, args)
    if bundle.cfg.train.label_mode == "label" and grade is None:
        raise UsageError("label mode needs --grade with --xray")
    inf = cfg.infer
    timings = []
    t0 = time.perf_counter()
    vol = P.infer_volume(bundle, xray, inf.s, inf.steps, cfg.seed, grade, inf.workers, inf.shared_noise,
                         timings=timings)
    total = time.perf_counter() - t0
    out = Path(cfg.paths.output_root) / "infer" / f"{name}_s{inf.s}_steps{inf.steps}_seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "volume.f32", vol.slices)
    for k, img in enumerate(vol.slices):
        M.save_png(img, out / f"slice_{k:03d}.png", -1.0, 1.0)
    _write_config(cfg, out)
    for k, dt in sorted(timings):
        print(f"slice {k:3d}  depth {vol.depths[k]:.4f}  {dt:.3f}s")
    print(f"{inf.s} slices in {total:.2f}s -> {out}")
    return EXIT_OK


def _read_volume(path: str) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        p = p / "volume.f32"
    return read_tensor(p)


def cmd_eval(cfg: RunConfig, args) -> int:
    pred = _read_volume(args.pred)
    region = None
    if Path(args.gt).exists():
        gt = _read_volume(args.gt)
    else:
        m = _manifest(cfg)
        entries = [e for e in m.samples if e.id == args.gt]
        if not entries:
            raise UsageError(f"--gt is neither a file nor a sample id: {args.gt}")
        s = load_sample(m, entries[0])
        gt, region = s.volume.slices, s.region
    if args.region:
        region = RegionSpec(*args.region)
    elif cfg.metrics.region:
        region = RegionSpec(*cfg.metrics.region)
    if pred.shape != gt.shape:
        raise UsageError(f"volume shapes differ: {pred.shape} vs {gt.shape}")
    rep = M.evaluate_volumes(pred, gt, region, cfg.metrics.peak, {"pred": str(args.pred), "gt": str(args.gt)})
    out = Path(cfg.paths.output_root) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out / "eval.csv")
    summary = rep.summary()
    summary["region"] = region.as_list() if region else None
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    for k in range(pred.shape[0]):
        M.save_png(M.sobel_difference_map(pred[k], gt[k]), out / f"sobel_diff_{k:03d}.png", 0.0, 1.0)
    _write_config(cfg, out)
    med = rep.medians
    print(f"median PSNR {med['psnr']:.3f} dB  SSIM {med['ssim']:.4f}  RSSIM {med['rssim']:.4f}")
    print(f"adjacent-slice correlation: generated {rep.corr_pred:.4f}  ground truth {rep.corr_gt:.4f}")
    print(f"report -> {out / 'eval.csv'}")
    return EXIT_OK


def cmd_interp_study(cfg: RunConfig, args) -> int:
    bundle = _load_bundle(cfg.paths.resolve("diff_checkpoint"), "diffusion")
    name, xray, grade, gt, _ = _input(cfg, args)
    if bundle.cfg.train.label_mode == "label" and grade is None:
        raise UsageError("label mode needs --grade with --xray")
    rows, _ = P.interp_study(bundle, xray, cfg.infer.s_list, cfg.infer.steps, cfg.seed, grade, gt, cfg.infer.workers)
    out = Path(cfg.paths.output_root) / "interp"
    out.mkdir(parents=True, exist_ok=True)
    P.interp_csv(rows, out / "interp.csv")
    plot = {"sample": name, "points": [[r.s, r.adjacent_corr] for r in rows],
            "reference": rows[0].gt_corr if rows else None}
    (out / "plot_data.json").write_text(json.dumps(plot, indent=2))
    _write_config(cfg, out)
    for r in rows:
        print(f"s={r.s:4d}  adjacent correlation {r.adjacent_corr:.4f}  (ground truth {r.gt_corr:.4f})")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-diff": cmd_train_diff,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "interp-study": cmd_interp_study,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](cfg, args)
    except P.NonFiniteLossError as exc:
        print(f"error: {exc} (last good checkpoint kept)", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, FileNotFoundError, ChecksumError, CheckpointError,
            P.MissingStageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
