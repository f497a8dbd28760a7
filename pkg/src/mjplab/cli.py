"""Command-line entry point: ``mjplab <verb> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, attack, plotting
from .checkpoint import load_checkpoint, save_checkpoint
from .config import VARIANTS, RunConfig, load_config
from .data import (KINDS, generate_synthetic_dataset, load_dataset, read_ppm, save_dataset,
                   write_ppm, write_raw)
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .jigsaw import (STREAM_MASK, STREAM_PERM, apply_permutation, blockwise_mask, jigsaw_permutation,
                     make_rng, patchify, unpatchify, write_permutation)
from .report import Report, export_metric_csvs, write_csv
from .train import evaluate, train
from .vit import model_forward

log = logging.getLogger("mjplab")


def _run_config(args, **overrides) -> RunConfig:
    over = {k: v for k, v in overrides.items() if v is not None}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    if args.seed is not None:
        over["seed"] = args.seed
    return load_config(args.config, over)


def _checkpoint_run(args, ck_run, **overrides) -> RunConfig:
    """Config for verbs that start from a checkpoint: its embedded run config
    unless ``--config`` is given, with command-line values on top."""
    if args.config is not None or ck_run is None:
        return _run_config(args, **overrides)
    over = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        over["seed"] = args.seed
    return ck_run.replace(**over)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report(out: Path, name: str, verb: str, run: RunConfig) -> Report:
    path = out / name
    if path.exists():
        path.unlink()
    rep = Report(path, f"{verb}-{run.hash()}-s{run.seed}", run.hash(), run.seed)
    rep.header(run.to_text())
    return rep


def cmd_gen_data(args) -> int:
    seed = 0 if args.seed is None else args.seed
    ds = generate_synthetic_dataset(args.kind, args.count, seed, size=args.size, channels=args.channels,
                                    patch=args.patch)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, ds)
    for i in range(min(args.ppm_samples, len(ds))):
        write_ppm(out.with_name(f"{out.stem}_{i}_label{ds.labels[i]}.ppm"), ds.images[i])
    print(f"wrote {len(ds)} {args.kind} images to {out}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args, variant=args.variant, gamma=args.gamma, dal=args.dal, eval_mode=args.eval_mode,
                      epochs=args.epochs)
    data = load_dataset(args.data)
    out = _outdir(args)
    rep = _report(out, "train.jsonl", "train", run)
    snap, opt, history = train(run, data, report=rep)
    save_checkpoint(out / "model.mjpc", snap, run, opt)
    export_metric_csvs(rep.records, out / "csv", key="epoch")
    plotting.training_curve(history, out / "train_curve.png")
    last = history[-1]
    print(f"trained variant {run.variant} gamma={run.train_gamma} -> loss {last['total']:.4f} "
          f"acc {last['acc']:.3f}; checkpoint {out / 'model.mjpc'}")
    return 0


def cmd_eval(args) -> int:
    snap, ck_run, _ = load_checkpoint(args.checkpoint)
    run = _checkpoint_run(args, ck_run, gamma_eval=args.gamma, eval_mode=args.eval_mode)
    data = load_dataset(args.data)
    out = _outdir(args)
    rep = _report(out, "eval.jsonl", "eval", run)
    modes = ["oblivious", "aware"] if args.both_modes else [run.eval_mode]
    rows = []
    for mode in modes:
        rows += evaluate(snap, data, run.gamma_evals(), mode, seed=run.seed, min_block_area=run.min_block_area,
                         report=rep)
    export_metric_csvs(rep.records, out / "csv")
    keys = list(rows[0])
    write_csv(out / "eval.csv", keys, [[r[k] for k in keys] for r in rows])
    for mode in modes:
        sub = [r for r in rows if r["eval_mode"] == mode]
        plotting.gamma_sweep(sub, out / f"consistency_{mode}.png", "consistency")
        plotting.gamma_sweep(sub, out / f"diff_norm_{mode}.png", "diff_norm")
    if args.dump_attention:
        n = min(args.dump_attention, len(data))
        x = np.stack([patchify(img, snap.config.patch) for img in data.images[:n]])
        res = model_forward(x, snap, keep_attention=True)
        for layer, maps in enumerate(res.attention):
            write_raw(out / f"attention_layer{layer}.raw", maps, f"attention_layer{layer}")
    for r in rows:
        print(f"{r['eval_mode']:9s} gamma_eval={r['gamma_eval']:.2f} top1={r['top1']:.4f} "
              f"consistency={r['consistency']:.4f} diff_norm={r['diff_norm']:.4f}")
    return 0


def _images(args) -> tuple[np.ndarray, np.ndarray | None]:
    if args.image:
        return read_ppm(args.image)[None], None
    if args.data:
        ds = load_dataset(args.data)
        n = min(args.count, len(ds))
        return ds.images[:n], ds.labels[:n]
    raise ContractError("give --image or --data")


def cmd_attack(args) -> int:
    snap, ck_run, _ = load_checkpoint(args.checkpoint)
    run = _checkpoint_run(args, ck_run, gamma=args.gamma)
    images, labels = _images(args)
    out = _outdir(args)
    rep = _report(out, "attack.jsonl", "attack", run)
    summary, per_image = attack.evaluate_attack(args.scenario, images, snap, run.gamma, seed=run.seed,
                                                labels=labels, no_unk=args.no_unk,
                                                min_block_area=run.min_block_area)
    extra = {"scenario": args.scenario, "gamma": run.gamma, "no_unk": args.no_unk}
    for r in per_image:
        res = r["result"]
        write_raw(out / f"recovered_{r['index']}.raw", res.image, f"recovered_{r['index']}")
        if args.ppm:
            write_ppm(out / f"recovered_{r['index']}.ppm", res.image)
        for key in ("mse", "psnr", "ssim", "fft2d_cos", "sigma_min"):
            rep.emit(f"attack_{key}", r[key], image=r["index"], ill_conditioned=r["ill_conditioned"], **extra)
    for key in ("mse", "psnr", "ssim", "fft2d_cos"):
        rep.emit(f"attack_{key}_mean", summary[key], summary[key + "_std"], **extra)
    keys = ["index", "mask_ratio", "mse", "psnr", "ssim", "fft2d_cos", "sigma_min", "ill_conditioned"]
    write_csv(out / "attack.csv", keys, [[r[k] for k in keys] for r in per_image])
    shown = min(6, len(per_image))
    plotting.image_grid({"input": list(images[:shown]),
                         "recovered": [r["result"].image for r in per_image[:shown]]}, out / "attack.png")
    print(f"scenario ({args.scenario}) gamma={run.gamma} no_unk={args.no_unk}: "
          f"mse={summary['mse']:.4g}±{summary['mse_std']:.2g} psnr={summary['psnr']:.3g} "
          f"ssim={summary['ssim']:.3g} fft2d_cos={summary['fft2d_cos']:.3g}")
    return 0


def cmd_analyze(args) -> int:
    snap, ck_run, _ = load_checkpoint(args.checkpoint)
    run = _checkpoint_run(args, ck_run)
    seed = run.seed
    center = not args.no_center
    out = _outdir(args)
    rep = _report(out, "analysis.jsonl", "analyze", run)
    pe = analysis.position_table(snap)
    if not np.any(pe):
        raise ContractError("checkpoint has an all-zero position table (PE-free model)")
    spec = analysis.spectral_summary(pe, center)
    rows = [[i + 1, float(s), float(r), float(c)]
            for i, (s, r, c) in enumerate(zip(spec.singular_values, spec.ratios, spec.cumulative))]
    write_csv(out / "spectral.csv", ["dim", "singular_value", "ratio", "cumulative"], rows)
    for d, _, _, c in rows:
        rep.emit("explained_variance", c, dim=d, center=center)
    probe = analysis.position_probe(pe, seed=seed)
    write_csv(out / "probe.csv", ["target", "mae", "std", "train_mae"],
              [["1d", probe.mae_1d, probe.std_1d, probe.train_1d], ["2d", probe.mae_2d, probe.std_2d, probe.train_2d]])
    rep.emit("probe_mae_1d", probe.mae_1d, probe.std_1d)
    rep.emit("probe_mae_2d", probe.mae_2d, probe.std_2d)
    for k in (2, 3):
        if k <= min(pe.shape):
            header, prow = analysis.pca_rows(pe, k, center)
            write_csv(out / f"pca{k}d.csv", header, prow)
    curves = {"model": spec.cumulative}
    if args.baseline:
        base, _, _ = load_checkpoint(args.baseline)
        curves["baseline"] = analysis.cumulative_energy(analysis.position_table(base), center)
        rep.emit("explained_variance_baseline", float(curves["baseline"][args.dims - 1]), dim=args.dims)
    plotting.energy_curve(curves, out / "energy.png", args.dims)
    side = analysis.grid_side(pe.shape[0])
    plotting.pe_scatter(analysis.pca_project(pe, 2, center), side, out / "pe_scatter.png")
    print(f"EV@{args.dims} = {spec.explained(args.dims):.4f}; probe MAE 1d {probe.mae_1d:.4f}±{probe.std_1d:.4f} "
          f"2d {probe.mae_2d:.4f}±{probe.std_2d:.4f}")
    return 0


def cmd_shuffle_demo(args) -> int:
    run = _run_config(args, gamma=args.gamma)
    images, _ = _images(args)
    img = images[min(args.index, len(images) - 1)] if args.data else images[0]
    p = args.patch or run.patch
    h, w, c = img.shape
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch {p}")
    mask = blockwise_mask(h // p, w // p, run.gamma, make_rng(run.seed, STREAM_MASK, 0),
                          min_block_area=run.min_block_area)
    pi = jigsaw_permutation(mask, make_rng(run.seed, STREAM_PERM, 0))
    shuffled = unpatchify(apply_permutation(patchify(img, p), pi), h, w, c, p)
    out = _outdir(args)
    write_ppm(out / "original.ppm", img)
    write_ppm(out / "shuffled.ppm", shuffled)
    np.savetxt(out / "mask.txt", mask, fmt="%d")
    write_permutation(out / "perm.txt", pi)
    plotting.image_grid({"original": [img], "shuffled": [shuffled]}, out / "shuffle.png")
    print(f"masked {int(mask.sum())}/{mask.size} patches (target gamma {run.gamma}); files in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mjplab", description="Masked jigsaw training and analysis on a toy ViT.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, fn, out_help, **kw):
        sp = sub.add_parser(name, **kw)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--config", default=None, help="key = value run configuration file")
        sp.add_argument("--out", required=True, help=out_help)
        sp.set_defaults(func=fn)
        return sp

    sp = verb("gen-data", cmd_gen_data, "dataset file to write", help="generate a synthetic MJPD dataset")
    sp.add_argument("--kind", choices=KINDS, default="layout-classes")
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--channels", type=int, default=3)
    sp.add_argument("--patch", type=int, default=4)
    sp.add_argument("--ppm-samples", type=int, default=0, help="also write the first N images as PPM")

    sp = verb("train", cmd_train, "output directory", help="train a model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--variant", choices=sorted(VARIANTS))
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--dal", choices=("ln", "nln", "pca", "none"))
    sp.add_argument("--eval-mode", choices=("oblivious", "aware"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    sp = verb("eval", cmd_eval, "output directory", help="top-1, Diff. Norm. and consistency")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--gamma", type=str, help="eval mask ratio or comma list")
    sp.add_argument("--eval-mode", choices=("oblivious", "aware"))
    sp.add_argument("--both-modes", action="store_true")
    sp.add_argument("--dump-attention", type=int, default=0, metavar="N",
                    help="dump attention maps of the first N images")

    sp = verb("attack", cmd_attack, "output directory", help="closed-form gradient inversion")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--image", help="PPM image instead of a dataset")
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--scenario", choices=attack.SCENARIOS, default="a")
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--no-unk", action="store_true", help="shuffled inputs keep the ordinary position table")
    sp.add_argument("--ppm", action="store_true", help="also write recovered images as PPM")

    sp = verb("analyze", cmd_analyze, "output directory", help="PCA and probe of the position table")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--baseline", help="second checkpoint for a comparison curve")
    sp.add_argument("--dims", type=int, default=3)
    sp.add_argument("--no-center", action="store_true")

    sp = verb("shuffle-demo", cmd_shuffle_demo, "output directory", help="show one block-wise jigsaw")
    sp.add_argument("--image")
    sp.add_argument("--data")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--patch", type=int)
    sp.add_argument("--gamma", type=float)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.verb == "shuffle-demo" and args.data:
        args.count = args.index + 1
    try:
        return args.func(args)
    except (ConfigError, FormatError, ContractError, DimensionError, OSError) as exc:
        print(f"mjplab {args.verb}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
