"""Command-line entry point: ``homwarp <command> [flags]``.

Settings resolve as built-in defaults < ``--config`` JSON file < flags, and
every command echoes the resolved settings. Exit codes: 0 success, 2 input
error, 3 training divergence, 4 data or checkpoint error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as D
from .errors import (
    CheckpointError,
    CorruptDataset,
    DivergedTraining,
    EmptyCorpus,
    NonFiniteUpdate,
    UnreadableImage,
)
from .geometry import Frame, Homography3, PixelNormalizer, denormalize_homography
from .imageio import read_pgm
from .model import RegressorConfig, save_checkpoint
from .pipeline.cascade import load_stages, sequence_infer
from .pipeline.evaluate import DEFAULT_WEIGHT_PAIRS, evaluate, loss_weight_sweep, sweep_csv
from .pipeline.schedule import TrainConfig
from .pipeline.timing import bench_timing
from .pipeline.training import train_hierarchical, train_sequence

log = logging.getLogger("homwarp")

EXIT_INPUT, EXIT_DIVERGED, EXIT_DATA = 2, 3, 4

DEFAULTS = {
    "gen-data": {"images": None, "synthetic": None, "per_image": 3, "seed": 0, "out": None,
                 "preset": "desk"},
    "train": {"data": None, "mode": "single", "stages": 1, "preset": "desk", "w2": 1.0,
              "w1": 1.0, "seed": 0, "out": None, "steps": None, "warmup": None,
              "batch_size": None, "lr": None, "withhold": 0.0, "dtype": "float32",
              "images": None, "synthetic": None, "corpus_seed": None},
    "eval": {"data": None, "ckpt": None, "mode": "single", "report": None, "images": None,
             "synthetic": None, "corpus_seed": None},
    "stats": {"data": None, "out_csv": None, "out_svg": None},
    "bench": {"ckpt": None, "stages": 1, "reps": 100, "out_csv": None, "seed": 0},
    "infer": {"ckpt": None, "patch_a": None, "patch_b": None, "mode": "single"},
    "sweep": {"data": None, "test": None, "preset": "desk", "seed": 0, "steps": None,
              "out_csv": None, "pairs": None},
}


class InputError(Exception):
    pass


def _resolve(args) -> dict:
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        section = file_cfg.get(args.command, file_cfg)
        cfg.update({k.replace("-", "_"): v for k, v in section.items()
                    if k.replace("-", "_") in cfg})
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    cfg["threads"] = args.threads
    return cfg


def _echo(cfg: dict):
    print("config " + json.dumps(cfg, sort_keys=True))


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise InputError(f"--{k.replace('_', '-')} is required")


def _corpus(cfg, data_cfg: D.DataConfig, seed_key="seed"):
    if cfg.get("images"):
        if not Path(cfg["images"]).is_dir():
            raise InputError(f"image directory not found: {cfg['images']}")
        return D.load_image_dir(cfg["images"], data_cfg.image_w, data_cfg.image_h)
    if cfg.get("synthetic"):
        seed = cfg.get(seed_key)
        return D.synthetic_corpus(int(cfg["synthetic"]), int(seed or 0), data_cfg)
    raise InputError("give --images DIR or --synthetic N")


def _data_preset(name: str) -> D.DataConfig:
    return D.DataConfig.desk() if name == "desk" else D.DataConfig.full()


def cmd_gen_data(cfg) -> int:
    _require(cfg, "out")
    dc = _data_preset(cfg["preset"])
    images = _corpus(cfg, dc)
    ds = D.generate_dataset(images, int(cfg["per_image"]), int(cfg["seed"]), dc,
                            threads=cfg["threads"])
    D.write_dataset(cfg["out"], ds)
    print(f"records {len(ds)}")
    print(D.stats_summary(D.dataset_stats(ds)))
    return 0


def _train_cfg(cfg) -> TrainConfig:
    base = TrainConfig.desk() if cfg["preset"] == "desk" else TrainConfig.full()
    over = {"w2": float(cfg["w2"]), "w1": float(cfg["w1"]), "seed": int(cfg["seed"]),
            "dtype": cfg["dtype"], "withhold_fraction": float(cfg["withhold"])}
    if cfg["warmup"] is not None:
        over["warmup_steps"] = int(cfg["warmup"])
    if cfg["steps"] is not None:
        warm = over.get("warmup_steps", base.warmup_steps)
        over["total_steps"] = int(cfg["steps"]) - warm
    if cfg["batch_size"] is not None:
        over["batch_size"] = int(cfg["batch_size"])
    if cfg["lr"] is not None:
        over["base_lr"] = float(cfg["lr"])
    return TrainConfig(**{**base.as_dict(), **over})


def _model_cfg(preset: str, side: int) -> RegressorConfig:
    return RegressorConfig.desk(side) if preset == "desk" else RegressorConfig(side=side)


def cmd_train(cfg) -> int:
    _require(cfg, "data", "out")
    ds = D.read_dataset(cfg["data"])
    tc = _train_cfg(cfg)
    mc = _model_cfg(cfg["preset"], ds.side)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    resolved = {**cfg, "train": tc.as_dict(), "model": asdict(mc)}
    (out / "config.json").write_text(json.dumps(resolved, sort_keys=True, indent=2,
                                                default=list) + "\n")
    k = int(cfg["stages"])
    if cfg["mode"] == "hierarchical":
        images = _corpus(cfg, D.DataConfig.for_patch(ds.side), "corpus_seed")
        res = train_hierarchical(ds, images, tc, mc, k)
        for i, (p, r) in enumerate(zip(res.stages, res.results)):
            save_checkpoint(p, out / f"stage_{i}.stnh")
            (out / f"curve_stage_{i}.csv").write_text(r.curve_csv())
        for i, sd in enumerate(res.datasets[1:], start=1):
            D.write_dataset(out / f"stage_{i}_data.hstn", sd)
        final = res.results[-1].final_loss
    else:
        stages = 1 if cfg["mode"] == "single" else k
        res = train_sequence(ds, tc, mc, stages)
        for i, p in enumerate(res.stages):
            save_checkpoint(p, out / f"stage_{i}.stnh")
        (out / "curve.csv").write_text(res.curve_csv())
        final = res.final_loss
    print(f"final training loss {final:.6f}")
    return 0


def cmd_eval(cfg) -> int:
    _require(cfg, "data", "ckpt")
    ds = D.read_dataset(cfg["data"])
    stages = load_stages(cfg["ckpt"])
    images = None
    if cfg["mode"] == "hierarchical":
        images = _corpus(cfg, D.DataConfig.for_patch(ds.side), "corpus_seed")
    rep = evaluate(stages, ds, cfg["mode"], images, config=cfg, threads=cfg["threads"])
    if cfg["report"]:
        Path(cfg["report"]).write_text(rep.csv())
    print(f"mean corner error {rep.mean:.4f} px over {len(ds)} samples")
    return 0


def cmd_stats(cfg) -> int:
    _require(cfg, "data")
    stats = D.dataset_stats(D.read_dataset(cfg["data"]))
    if cfg["out_csv"]:
        Path(cfg["out_csv"]).write_text(D.stats_csv(stats))
    if cfg["out_svg"]:
        Path(cfg["out_svg"]).write_text(D.stats_svg(stats))
    print(f"records {stats.count}")
    print(D.stats_summary(stats))
    return 0


def cmd_bench(cfg) -> int:
    _require(cfg, "ckpt")
    stage = load_stages(cfg["ckpt"])[0]
    side = stage.params.config.side if hasattr(stage, "params") else 32
    dc = D.DataConfig.for_patch(side)
    img = D.synth_texture(int(cfg["seed"]), dc.image_w, dc.image_h)
    rec = D.generate_sample(img, np.random.default_rng(int(cfg["seed"])), dc)
    rep = bench_timing(stage, D.quantize(img), rec.patch_b, rec.rect, int(cfg["stages"]),
                       int(cfg["reps"]))
    print(rep.text(), end="")
    if cfg["out_csv"]:
        Path(cfg["out_csv"]).write_text(rep.csv())
    return 0


def cmd_infer(cfg) -> int:
    _require(cfg, "ckpt", "patch_a", "patch_b")
    a = read_pgm(cfg["patch_a"])
    b = read_pgm(cfg["patch_b"])
    if a.shape != b.shape:
        raise InputError("patches differ in size")
    stages = load_stages(cfg["ckpt"])
    if cfg["mode"] == "single":
        stages = stages[:1]
    merged = sequence_infer(stages, a[None], b[None])[-1][0]
    hn = Homography3(merged, Frame.NORMALIZED)
    hp = denormalize_homography(hn, PixelNormalizer(a.shape[1], a.shape[0]))
    print("normalized", hn.to_text())
    print("pixel", hp.to_text())
    return 0


def cmd_sweep(cfg) -> int:
    _require(cfg, "data", "test")
    train_ds = D.read_dataset(cfg["data"])
    test_ds = D.read_dataset(cfg["test"])
    tc = _train_cfg({**DEFAULTS["train"], **{k: cfg[k] for k in ("preset", "seed", "steps")}})
    mc = _model_cfg(cfg["preset"], train_ds.side)
    pairs = DEFAULT_WEIGHT_PAIRS
    if cfg["pairs"]:
        pairs = [tuple(float(v) for v in p.split(",")) for p in cfg["pairs"].split(";")]
    rows = loss_weight_sweep(train_ds, test_ds, tc, mc, pairs)
    text = sweep_csv(rows, cfg)
    if cfg["out_csv"]:
        Path(cfg["out_csv"]).write_text(text)
    print(text, end="")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "stats": cmd_stats, "bench": cmd_bench, "infer": cmd_infer, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="homwarp", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with settings (flat or per command)")
    common.add_argument("--threads", type=int,
                        default=int(os.environ.get("HOMWARP_THREADS", "1")),
                        help="worker threads; 1 forces the deterministic sequential path")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a patch-pair dataset")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--images", help="directory of PGM/PNG images")
    src.add_argument("--synthetic", type=int, help="number of synthetic texture images")
    g.add_argument("--per-image", type=int, dest="per_image")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--preset", choices=("full", "desk"))

    t = sub.add_parser("train", parents=[common], help="train one or more stages")
    t.add_argument("--data")
    t.add_argument("--mode", choices=("single", "hierarchical", "sequence"))
    t.add_argument("--stages", type=int)
    t.add_argument("--preset", choices=("full", "desk"))
    t.add_argument("--w2", type=float, help="weight of the homography L2 loss")
    t.add_argument("--w1", type=float, help="weight of the photometric L1 loss")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--steps", type=int, help="total optimizer steps including warmup")
    t.add_argument("--warmup", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--withhold", type=float, help="fraction of samples trained without targets")
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--images", help="source images (hierarchical mode)")
    t.add_argument("--synthetic", type=int, help="synthetic corpus size (hierarchical mode)")
    t.add_argument("--corpus-seed", type=int, dest="corpus_seed",
                   help="seed the dataset was generated with (hierarchical mode)")

    e = sub.add_parser("eval", parents=[common], help="mean corner error on a dataset")
    e.add_argument("--data")
    e.add_argument("--ckpt", help="checkpoint dir or file, or 'oracle' / 'identity'")
    e.add_argument("--mode", choices=("single", "hierarchical", "sequence"))
    e.add_argument("--report")
    e.add_argument("--images")
    e.add_argument("--synthetic", type=int)
    e.add_argument("--corpus-seed", type=int, dest="corpus_seed")

    s = sub.add_parser("stats", parents=[common], help="histograms of target elements")
    s.add_argument("--data")
    s.add_argument("--out-csv", dest="out_csv")
    s.add_argument("--out-svg", dest="out_svg")

    b = sub.add_parser("bench", parents=[common], help="latency of the hierarchical cascade")
    b.add_argument("--ckpt")
    b.add_argument("--stages", type=int)
    b.add_argument("--reps", type=int)
    b.add_argument("--out-csv", dest="out_csv")
    b.add_argument("--seed", type=int)

    i = sub.add_parser("infer", parents=[common], help="estimate H between two PGM patches")
    i.add_argument("--ckpt")
    i.add_argument("--patch-a", dest="patch_a")
    i.add_argument("--patch-b", dest="patch_b")
    i.add_argument("--mode", choices=("single", "sequence"))

    w = sub.add_parser("sweep", parents=[common], help="loss-weight sweep of single models")
    w.add_argument("--data")
    w.add_argument("--test")
    w.add_argument("--preset", choices=("full", "desk"))
    w.add_argument("--seed", type=int)
    w.add_argument("--steps", type=int)
    w.add_argument("--pairs", help="'w2,w1;w2,w1;...'")
    w.add_argument("--out-csv", dest="out_csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        _echo(cfg)
        return COMMANDS[args.command](cfg)
    except (InputError, EmptyCorpus, UnreadableImage) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CorruptDataset, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergedTraining, NonFiniteUpdate) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
