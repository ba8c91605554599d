"""Command-line entry point: ``objformer <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import netpbm
from .data.dataset import load_dataset, read_manifest, save_dataset, save_sample, write_manifest, load_sample
from .data.sample import MAP_PALETTE, check_invariants
from .data.synth import synth_generate
from .data.transforms import DIRECTIONS, attach_maps
from .harness import (REG_OFFSETS, RunConfig, Trainer, bench_attention_macs, evaluate, load_model,
                      pooling_sweep, registration_sweep, time_attention, update_heatmap, write_csv)
from .metrics import format_table
from .net import ModelConfig, ObjFormer, complexity_table

log = logging.getLogger("objformer")


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    pairs = []
    test_seed = args.seed + args.n if args.test_seed is None else args.test_seed
    for i in range(args.n + args.n_test):
        seed = args.seed + i if i < args.n else test_seed + i - args.n
        s = synth_generate(seed, args.height, args.width, args.shapes, args.change_rate, args.texture,
                           args.background, id=f"p{i:05d}")
        if args.scales:
            s = attach_maps(s, args.scales)
        check_invariants(s)
        pairs.append((s, "train" if i < args.n else "test"))
    man = save_dataset(pairs, out)
    man.validate(out)
    print(f"wrote {len(man.records)} pairs to {out}")
    return 0


def cmd_segment(args) -> int:
    root = Path(args.data)
    man = read_manifest(root)
    for i, rec in enumerate(man.records):
        s = attach_maps(load_sample(rec, root), args.scales, compactness=args.compactness)
        check_invariants(s)
        man.records[i] = save_sample(s, root, rec.split, rec.region)
    write_manifest(man, root)
    print(f"segmented {len(man.records)} pairs at scales {args.scales}")
    return 0


def _run_config(args) -> RunConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    flags = {
        "task": args.task, "preset": args.preset, "lr": args.lr, "weight_decay": args.weight_decay,
        "lr_schedule": args.lr_schedule,
        "batch_size": args.batch_size, "iterations": args.iterations, "seed": args.seed,
        "object_scales": args.scales, "fusion": args.fusion, "multiscale": args.multiscale,
        "eval_every": args.eval_every, "registration_aug": args.registration_aug, "data": args.data, "out": args.out,
    }
    d.update({k: v for k, v in flags.items() if v is not None})
    if args.cce is not None:
        d["cce"] = args.cce == "on"
    if args.no_augment:
        d["augment"] = False
    return RunConfig.from_dict(d).validate()


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not cfg.data or not cfg.out:
        raise SystemExit("train needs --data and --out (or a config providing them)")
    train = load_dataset(cfg.data, "train", args.basemap_filter)
    test = load_dataset(cfg.data, "test", args.basemap_filter)
    if args.resume:
        tr = Trainer.resume(args.resume, train, test, cfg.out, **{k: v for k, v in cfg.to_dict().items()
                                                                    if k in ("iterations", "out", "data")})
    else:
        tr = Trainer(cfg, train, test, cfg.out)
    t0 = time.perf_counter()
    tr.fit(log_every=args.log_every)
    summary = {"iterations": tr.iteration, "seconds": time.perf_counter() - t0, "best": tr.best}
    if test:
        summary["final"] = tr.evaluate().report.to_dict()
    Path(cfg.out, "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))
    return 0


def _write_predictions(out: Path, samples, ev) -> None:
    pred = out / "predictions"
    pred.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        bcd = np.where(s.y_bcd == 255, 255, ev.pred_bcd[i]).astype(np.uint8)
        netpbm.write(pred / f"{s.id}_bcd.pgm", bcd)
        netpbm.write(pred / f"{s.id}_update_heat.pgm", update_heatmap(ev.p_change[i]))
        if ev.pred_lcm is not None:
            netpbm.write(pred / f"{s.id}_lcm_opt.ppm", MAP_PALETTE.render(ev.pred_lcm[i].astype(np.uint8)))


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    samples = load_dataset(args.data, args.split, args.basemap_filter)
    scales = args.scales or list(samples[0].object_maps)[:1]
    if not args.fuse:
        scales = scales[:1]
    ev = evaluate(model, samples, scales)
    print(ev.report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(ev.report.to_json())
        (out / "report.txt").write_text(ev.report.to_text() + "\n")
        _write_predictions(out, samples, ev)
    return 0


def cmd_bench_attn(args) -> int:
    rows = bench_attention_macs(args.sides, args.tokens, args.channels, args.heads)
    print(format_table(rows))
    result = {"layer": rows}
    if args.model:
        model = ObjFormer(ModelConfig.from_preset(args.preset, task=args.task))
        table = complexity_table(model, args.model, args.model, n_obj=args.tokens[0], n_ins=args.tokens[0])
        print()
        print(format_table(table))
        result["model"] = table
    if args.time:
        t = time_attention(args.time_side, args.tokens[0], args.channels, args.heads)
        print()
        print(format_table([t]))
        result["timing"] = t
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=1))
    return 0


def cmd_reg_sweep(args) -> int:
    model = load_model(args.checkpoint)
    samples = load_dataset(args.data, args.split)
    scales = args.scales or list(samples[0].object_maps)[:1]
    avg, per_dir = registration_sweep(model, samples, scales, args.offsets, args.directions)
    print(format_table(avg))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "registration.csv", avg)
        write_csv(out / "registration_by_direction.csv", per_dir)
    return 0


def cmd_pool_sweep(args) -> int:
    cfg = _run_config(args)
    train = load_dataset(cfg.data, "train")
    test = load_dataset(cfg.data, "test")
    rows = pooling_sweep(cfg, train, test)
    print(format_table(rows))
    if cfg.out:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        write_csv(Path(cfg.out) / "pooling.csv", rows)
    return 0


def cmd_inspect(args) -> int:
    p = Path(args.path)
    if p.is_dir():
        man = read_manifest(p)
        man.validate(p)
        splits = {}
        for r in man.records:
            splits[r.split] = splits.get(r.split, 0) + 1
        info = {"version": man.version, "samples": len(man.records), "splits": splits,
                "object_scales": sorted({s for r in man.records for s in r.object_scales})}
    elif p.suffix in (".ppm", ".pgm"):
        a = netpbm.read(p)
        info = {"shape": list(a.shape), "dtype": str(a.dtype), "min": int(a.min()), "max": int(a.max())}
    else:
        ck = ckpt.load(p)
        n = sum(int(np.prod(v.shape)) for k, v in ck.tensors.items() if not k.startswith("adam."))
        info = {"step": ck.step, "params": n, "config": ck.config, "meta": ck.meta}
    print(json.dumps(info, indent=1))
    return 0


# ---------------------------------------------------------------------------
# parser


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its fields")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--task", choices=("bcd", "scd"))
    p.add_argument("--preset", choices=("paper", "tiny"))
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--scales", type=_ints, help="object scales, e.g. 1000,1500,2000")
    p.add_argument("--fusion", choices=("mean", "max", "min", "mean+max"))
    p.add_argument("--cce", choices=("on", "off"))
    p.add_argument("--multiscale", choices=("train", "test", "both", "off"))
    p.add_argument("--eval-every", type=int)
    p.add_argument("--registration-aug", type=int, help="max random optical offset in pixels")
    p.add_argument("--no-augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="objformer", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--n", type=int, default=64, help="training pairs")
    p.add_argument("--n-test", type=int, default=32, help="held-out pairs")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--shapes", type=int, default=8)
    p.add_argument("--change-rate", type=float, default=0.3)
    p.add_argument("--texture", type=float, default=1.0)
    p.add_argument("--background", type=float, default=0.0, help="fraction of shapes left unmapped")
    p.add_argument("--scales", type=_ints, default=[], help="also precompute object maps at these scales")
    p.add_argument("--seed", type=int, default=0, help="seed of the first training pair")
    p.add_argument("--test-seed", type=int, help="seed of the first held-out pair (default: after the training seeds)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("segment", help="precompute instance and object maps")
    p.add_argument("--data", required=True)
    p.add_argument("--scales", type=_ints, default=[1500])
    p.add_argument("--compactness", type=float, default=0.1)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("train", help="train a model")
    _train_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--basemap-filter", action="store_true", help="drop pairs that are >= 80%% unmapped")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--scales", type=_ints)
    p.add_argument("--fuse", action="store_true", help="average probabilities over all scales")
    p.add_argument("--basemap-filter", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench-attn", help="attention complexity comparison")
    p.add_argument("--sides", type=_ints, default=[32, 64, 128])
    p.add_argument("--tokens", type=_ints, default=[500, 1000, 1500, 2000])
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--model", type=int, help="also tabulate the full model at this input side")
    p.add_argument("--preset", default="paper", choices=("paper", "tiny"))
    p.add_argument("--task", default="bcd", choices=("bcd", "scd"))
    p.add_argument("--time", action="store_true", help="measure wall-clock time too")
    p.add_argument("--time-side", type=int, default=128)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench_attn)

    p = sub.add_parser("reg-sweep", help="evaluate under simulated misregistration")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--scales", type=_ints)
    p.add_argument("--offsets", type=_ints, default=list(REG_OFFSETS))
    p.add_argument("--directions", type=lambda t: t.split(","), default=list(DIRECTIONS))
    p.add_argument("--out")
    p.set_defaults(fn=cmd_reg_sweep)

    p = sub.add_parser("pool-sweep", help="compare token pooling statistics")
    _train_flags(p)
    p.set_defaults(fn=cmd_pool_sweep)

    p = sub.add_parser("inspect", help="summarise a dataset, checkpoint or PPM/PGM file")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
