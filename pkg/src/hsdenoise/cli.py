"""Batch command-line front end.

Commands compose into the full desk-scale pipeline with no manual steps:

    hsdenoise simulate --in clean.hsr --noise iid_gaussian --sigma 25 \
        --seed 7 --out noisy.hsr
    hsdenoise train --config exp.toml --out model.ckpt
    hsdenoise denoise --ckpt model.ckpt --in noisy.hsr --out denoised.hsr
    hsdenoise eval --ref clean.hsr --test denoised.hsr --out report.txt
    hsdenoise info --in cube.hsr
    hsdenoise info --ckpt model.ckpt

Exit codes: 0 success, 2 validation error, 3 I/O or format error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .config import ExperimentConfig, load_experiment
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    DomainError,
    FormatError,
    HsdError,
    InputTooSmallError,
)
from .hsio import (
    HsiCube,
    extract_patches,
    import_bsq,
    merge_datasets,
    normalize_global,
    normalize_percentile,
    read_hsr,
    write_hsr,
)
from .metrics import MetricReport, metric_report
from .model import DenoisingModel
from .noise import NoiseSpec, apply_noise
from .training import (
    load_checkpoint,
    prepare_ssl_records,
    save_checkpoint,
    train_ssl,
    train_supervised,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

THREADS_ENV = "HSDENOISE_THREADS"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsdenoise", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=int(os.environ.get(THREADS_ENV, "1")),
                        help="worker thread cap for tiled inference")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="apply a synthetic degradation to a cube")
    sim.add_argument("--in", dest="inp", required=True)
    sim.add_argument("--noise", required=True, choices=["iid_gaussian", "band_uniform", "correlated", "stripes"])
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.add_argument("--sigma", type=float, default=25.0)
    sim.add_argument("--sigma-min", type=float, default=10.0)
    sim.add_argument("--sigma-max", type=float, default=70.0)
    sim.add_argument("--beta", type=float, default=23.08)
    sim.add_argument("--eta", type=float, default=0.157)

    tr = sub.add_parser("train", help="train a model from an experiment config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", help="checkpoint path (overrides output.checkpoint)")
    tr.add_argument("--resume", help="continue from an existing checkpoint")
    tr.add_argument("--seed", type=int, help="override train.seed")

    de = sub.add_parser("denoise", help="restore a cube with a trained model")
    de.add_argument("--ckpt", required=True)
    de.add_argument("--in", dest="inp", required=True)
    de.add_argument("--out", required=True)
    de.add_argument("--blind", action="store_true", help="estimate per-band weights first")
    de.add_argument("--sensor", help="sensor id when cube metadata lacks one")
    de.add_argument("--block", type=int, default=256)
    de.add_argument("--overlap", type=int, default=6)

    ev = sub.add_parser("eval", help="score a restored cube against its reference")
    ev.add_argument("--ref", required=True)
    ev.add_argument("--test", required=True)
    ev.add_argument("--out", required=True)

    imp = sub.add_parser("import", help="convert a band-sequential raster to HSR")
    imp.add_argument("--header", required=True)
    imp.add_argument("--data", required=True)
    imp.add_argument("--out", required=True)
    imp.add_argument("--sensor", default="")

    info = sub.add_parser("info", help="describe a cube or a checkpoint")
    group = info.add_mutually_exclusive_group(required=True)
    group.add_argument("--in", dest="inp")
    group.add_argument("--ckpt")
    return parser


# ---------------------------------------------------------------------------
# commands


def _cmd_simulate(args) -> int:
    cube = read_hsr(args.inp)
    spec = NoiseSpec(
        kind=args.noise,
        sigma=args.sigma,
        sigma_min=args.sigma_min,
        sigma_max=args.sigma_max,
        beta=args.beta,
        eta=args.eta,
    )
    noisy, info = apply_noise(cube.data, spec, args.seed)
    out = HsiCube(noisy, sensor_id=cube.sensor_id, band_stats=cube.band_stats)
    write_hsr(args.out, out)
    sidecar = {
        "tool": f"hsdenoise {__version__}",
        "noise": spec.to_dict(),
        "seed": args.seed,
        "drawn": info,
    }
    with open(str(args.out) + ".noise.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    print(f"wrote {args.out} ({cube.bands}x{cube.height}x{cube.width}, {args.noise})")
    return EXIT_OK


def _load_cubes(paths) -> list:
    return [read_hsr(p) for p in paths]


def _normalized_training_set(cfg: ExperimentConfig, cubes):
    mode = cfg.dataset.normalization
    if mode == "percentile":
        return normalize_percentile(cubes)
    if mode == "global":
        return [normalize_global(c) for c in cubes], None
    return cubes, None


def _cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    cfg = load_experiment(args.config, overrides)
    ckpt_path = args.out or cfg.output.checkpoint

    cubes = _load_cubes(cfg.dataset.resolve_paths("train"))
    bands = cubes[0].bands
    for cube in cubes:
        if cube.bands != bands:
            raise ConfigError("dataset.train: cubes disagree on band count")
    sensor = cfg.dataset.sensor
    if cfg.model.sensors.get(sensor, 0) == 0:
        cfg.model.sensors[sensor] = bands
    if cfg.model.sensors[sensor] != bands:
        raise ConfigError(
            f"model.sensors.{sensor}: configured {cfg.model.sensors[sensor]} bands, data has {bands}"
        )
    cubes, _ = _normalized_training_set(cfg, cubes)

    if args.resume:
        model, start_step, _ = load_checkpoint(args.resume)
    else:
        model, start_step = DenoisingModel.build(cfg.model, seed=cfg.train.seed), 0

    crop = cfg.dataset.center_crop or None
    if cfg.train.mode == "ssl":
        records = prepare_ssl_records(
            cubes,
            cfg.train.noise,
            seed=cfg.train.seed,
            patch=cfg.patches.size,
            strides=cfg.patches.strides,
            scales=cfg.patches.scales,
            crop=crop,
        )
        log, total = train_ssl(
            model, records, cfg.train, sensor_id=sensor,
            checkpoint_path=ckpt_path, start_step=start_step,
        )
    else:
        dataset = merge_datasets(
            [
                extract_patches(
                    cube,
                    patch=cfg.patches.size,
                    strides=cfg.patches.strides,
                    scales=cfg.patches.scales,
                    crop=crop,
                    image_id=str(i),
                )
                for i, cube in enumerate(cubes)
            ]
        )
        log, total = train_supervised(
            model, dataset, cfg.train, sensor_id=sensor,
            checkpoint_path=ckpt_path, start_step=start_step,
        )
    save_checkpoint(ckpt_path, model, total, train_config=cfg.train, extra=cfg.to_dict())
    log.header = f"hsdenoise {__version__}\nconfig: {cfg.to_json()}"
    log.save(cfg.output.log)
    last = log.entries[-1].loss if log.entries else float("nan")
    print(f"trained to step {total}; final loss {last:.6g}; checkpoint {ckpt_path}")
    return EXIT_OK


def _cmd_denoise(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    cube = read_hsr(args.inp)
    sensor = args.sensor or (cube.sensor_id or None)
    band_weights = None
    if args.blind:
        band_weights = model.estimate_band_weights(cube.data)  # raises without estimator
    restored = model.block_inference(
        cube.data,
        sensor_id=sensor,
        band_weights=band_weights,
        block=args.block,
        overlap=args.overlap,
        threads=args.threads,
    )
    write_hsr(args.out, HsiCube(restored, sensor_id=cube.sensor_id, band_stats=cube.band_stats))
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ref = read_hsr(args.ref)
    test = read_hsr(args.test)
    if ref.shape != test.shape:
        raise DimensionError(f"shape mismatch: reference {ref.shape}, test {test.shape}")
    report = metric_report(ref.data, test.data)
    header = [
        f"# hsdenoise {__version__}",
        f"# ref: {args.ref}",
        f"# test: {args.test}",
    ]
    header.extend(f"# {flag}" for flag in MetricReport.HEADER_FLAGS)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(header) + "\n")
        f.write(report.to_lines() + "\n\n")
        f.write(report.to_table() + "\n")
    print(report.to_table())
    return EXIT_OK


def _cmd_import(args) -> int:
    cube = import_bsq(args.header, args.data, sensor_id=args.sensor)
    write_hsr(args.out, cube)
    print(f"wrote {args.out} ({cube.bands}x{cube.height}x{cube.width})")
    return EXIT_OK


def _cmd_info(args) -> int:
    if args.inp:
        cube = read_hsr(args.inp)
        print(f"cube: {cube.bands} bands x {cube.height} x {cube.width}")
        print(f"sensor: {cube.sensor_id or '(none)'}")
        print(f"range: [{cube.data.min():.6g}, {cube.data.max():.6g}]")
        if cube.band_stats:
            print("band stats (p2, p98, min, max):")
            for b, st in enumerate(cube.band_stats):
                print(f"  band {b}: {st.p2:.6g} {st.p98:.6g} {st.vmin:.6g} {st.vmax:.6g}")
        return EXIT_OK
    model, step, config = load_checkpoint(args.ckpt)
    counts = model.param_counts()
    print(f"checkpoint: step {step}")
    print(f"sensors: {', '.join(f'{k} ({v} bands)' for k, v in sorted(model.config.sensors.items()))}")
    for name, count in counts.items():
        print(f"params[{name}]: {count}")
    shared = counts["shared"]
    for name, count in counts.items():
        if name.startswith("spectral."):
            print(f"shared/{name} ratio: {shared / count:.1f}x")
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "denoise": _cmd_denoise,
    "eval": _cmd_eval,
    "import": _cmd_import,
    "info": _cmd_info,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DomainError, DimensionError, InputTooSmallError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except HsdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
