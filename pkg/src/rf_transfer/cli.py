"""Command-line entry point: ``rf-transfer <subcommand> [options]``.

Exit codes: 0 success, 2 validation or I/O error, 3 numeric divergence.
Every failure prints exactly one ``error: <Type>: <reason>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import imageio
from .bench import FLOWS, bench_solver, format_table
from .config import RunConfig, load_config, validate
from .errors import ConfigError, TransferError
from .fusion import KVCache
from .pipeline import TransferJob, run_ablation, run_reconstruct, run_transfer
from .scenes import gen_scene, random_transfer_scenes
from .selftest import run_selftest
from .solvers import METHODS, Trajectory


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="run seed (fallback: RF_TRANSFER_SEED)")
    p.add_argument("--steps", type=int)
    p.add_argument("--solver", choices=METHODS)


def _job_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, help="free steps after replay (default steps/2)")
    p.add_argument("--eps-floor", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--layers", help="comma-separated attention site ids")
    p.add_argument("--parallel", action="store_true", help="invert source and reference concurrently")
    p.add_argument("--no-fusion", action="store_true", help="disable K/V context expansion")
    p.add_argument("--no-appearance", action="store_true", help="drop the appearance tokens")
    p.add_argument("--no-gate", action="store_true", help="expand attention for every query")
    p.add_argument("--timings", action="store_true", help="record wall-clock stage timings in reports")
    for name in ("source", "reference", "src-mask", "ref-mask", "depth", "ref-depth"):
        p.add_argument(f"--{name}", help=f"{name} image (default: configured scene)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="rf-transfer", description="Training-free appearance transfer on a toy rectified-flow DiT")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write configured or random scene pairs")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, help="write this many random pairs instead of the configured one")

    p = sub.add_parser("invert", help="invert an image and save its trajectory")
    _common(p)
    p.add_argument("--image", help="P6 image (default: configured source scene)")
    p.add_argument("--mask", help="P5 region mask")
    p.add_argument("--depth", help="P5 pseudo-depth")
    p.add_argument("--out", required=True, help=".traj output")

    p = sub.add_parser("reconstruct", help="invert then resample an image")
    _common(p)
    p.add_argument("--image")
    p.add_argument("--mask")
    p.add_argument("--depth")
    p.add_argument("--out", required=True, help=".ppm output")
    p.add_argument("--report", help=".json report")
    p.add_argument("--save-traj", help=".traj output")

    p = sub.add_parser("transfer", help="run the appearance transfer pipeline")
    _common(p)
    _job_flags(p)
    p.add_argument("--out", required=True, help=".ppm output")
    p.add_argument("--report", help=".json report")
    p.add_argument("--save-traj", help="source trajectory .traj output")
    p.add_argument("--save-ref-traj", help="reference trajectory .traj output")
    p.add_argument("--save-kv", help="reference K/V cache .kvc output")
    p.add_argument("--load-kv", help="reuse a saved .kvc instead of inverting the reference")

    p = sub.add_parser("ablate", help="conditions-only / +replay / +expansion ablation")
    _common(p)
    _job_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--report", help=".json report (default: <out-dir>/ablation.json)")

    p = sub.add_parser("bench-solver", help="convergence table for both solvers")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--flow", choices=FLOWS, default="gaussian")
    p.add_argument("--a", type=float, default=2.0, help="data scale of the Gaussian flow")
    p.add_argument("--steps", default="16,32,64,128", help="comma-separated step counts")
    p.add_argument("--ref-steps", type=int, default=4096, help="Euler reference resolution (mixture/dit)")
    p.add_argument("--json", help="write the result as JSON")

    p = sub.add_parser("selftest", help="run the invariant suite")
    return ap


def _seed(args, cfg: RunConfig) -> int:
    """Precedence: --seed, then the config's [run] seed, then RF_TRANSFER_SEED, then 0."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    if cfg.seed is not None:
        return cfg.seed
    env = os.environ.get("RF_TRANSFER_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"RF_TRANSFER_SEED={env!r} is not an integer") from None


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.seed = _seed(args, cfg)
    if getattr(args, "steps", None) is not None and not isinstance(args.steps, str):
        cfg.steps = args.steps
    if getattr(args, "solver", None):
        cfg.method = args.solver
    for flag, attr in (("k", "k"), ("eps_floor", "eps_floor"), ("tau", "tau")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, attr, val)
    if getattr(args, "layers", None):
        try:
            cfg.selected_layers = [int(x) for x in args.layers.split(",")]
        except ValueError:
            raise ConfigError(f"--layers expects integers, got {args.layers!r}") from None
    if getattr(args, "parallel", False):
        cfg.parallel = True
    if getattr(args, "no_fusion", False):
        cfg.fusion_enabled = False
    if getattr(args, "no_appearance", False):
        cfg.use_appearance = False
    if getattr(args, "no_gate", False):
        cfg.gate_queries = False
    validate(cfg)
    return cfg


def _read_or(path, fallback, reader):
    return fallback if path is None else reader(path)


def _inputs(args, cfg: RunConfig):
    (src, ms, ds), (ref, mr, dr) = cfg.scenes()
    src = _read_or(getattr(args, "source", None), src, imageio.read_ppm)
    ref = _read_or(getattr(args, "reference", None), ref, imageio.read_ppm)
    ms = _read_or(getattr(args, "src_mask", None), ms, imageio.read_pgm)
    mr = _read_or(getattr(args, "ref_mask", None), mr, imageio.read_pgm)
    ds = _read_or(getattr(args, "depth", None), ds, imageio.read_pgm)
    dr = _read_or(getattr(args, "ref_depth", None), dr, imageio.read_pgm)
    return src, ref, ms, mr, ds, dr


def _job(args, cfg: RunConfig) -> TransferJob:
    src, ref, ms, mr, ds, dr = _inputs(args, cfg)
    return TransferJob(src, ref, ms, mr, ds, dr, cfg.solver(), k=cfg.k,
                       selected_layers=cfg.selected_layers, fusion_enabled=cfg.fusion_enabled,
                       gate_queries=cfg.gate_queries, use_appearance=cfg.use_appearance,
                       eps_floor=cfg.eps_floor, tau=cfg.tau, seed=cfg.seed, parallel=cfg.parallel)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _single_source(args, cfg):
    (src, ms, ds), _ = cfg.scenes()
    img = _read_or(args.image, src, imageio.read_ppm)
    mask = _read_or(args.mask, ms if args.image is None else None, imageio.read_pgm)
    depth = _read_or(args.depth, ds if args.image is None else None, imageio.read_pgm)
    hw = img.shape[1:]
    return img, np.zeros(hw) if mask is None else mask, np.zeros(hw) if depth is None else depth


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.count is None:
        pairs = [("", cfg.scenes())]
    else:
        pairs = []
        for i in range(args.count):
            a, b = random_transfer_scenes(cfg.seed + i, cfg.model.latent_hw)
            pairs.append((f"pair_{i:03d}/", (gen_scene(a, cfg.seed + i), gen_scene(b, cfg.seed + i + 1))))
    for prefix, scenes in pairs:
        (out / prefix).mkdir(parents=True, exist_ok=True)
        for role, (img, mask, depth) in zip(("source", "reference"), scenes):
            imageio.write_ppm(out / f"{prefix}{role}.ppm", img)
            imageio.write_pgm(out / f"{prefix}{role}_mask.pgm", mask)
            imageio.write_pgm(out / f"{prefix}{role}_depth.pgm", depth)
    print(f"wrote {len(pairs)} scene pair(s) to {out}")
    return 0


def cmd_invert(args) -> int:
    cfg = _config(args)
    w = cfg.load_weights()
    img, mask, depth = _single_source(args, cfg)
    res = run_reconstruct(img, cfg.solver(), w, depth=depth, region=mask, prior=cfg.prior())
    res.trajectory.save(args.out)
    print(f"trajectory: {res.trajectory.n} steps ({cfg.method}) -> {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    w = cfg.load_weights()
    img, mask, depth = _single_source(args, cfg)
    res = run_reconstruct(img, cfg.solver(), w, depth=depth, region=mask, prior=cfg.prior())
    imageio.write_ppm(args.out, np.clip(res.output, 0.0, 1.0))
    if args.save_traj:
        res.trajectory.save(args.save_traj)
    if args.report:
        _write_json(args.report, res.report)
    print(f"recon_err={res.report['recon_err']:.3e}")
    return 0


def cmd_transfer(args) -> int:
    cfg = _config(args)
    w = cfg.load_weights()
    job = _job(args, cfg)
    cache = KVCache.load(args.load_kv) if args.load_kv else None
    res = run_transfer(job, w, cfg.prior(), cache=cache)
    imageio.write_ppm(args.out, res.output)
    if args.save_traj:
        res.traj_src.save(args.save_traj)
    if args.save_ref_traj and res.traj_ref is not None:
        res.traj_ref.save(args.save_ref_traj)
    if args.save_kv and res.cache is not None:
        res.cache.save(args.save_kv)
    if args.report:
        report = dict(res.report)
        if not args.timings:
            report["stage_timings_ms"] = None
        _write_json(args.report, report)
    r = res.report
    inside = "n/a" if r["mean_color_dist"] is None else f"{r['mean_color_dist']:.4f}"
    print(f"k={r['k']}/{r['n']} masked_err_out={r['masked_err_out']:.3e} mean_color_dist={inside}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    w = cfg.load_weights()
    job = _job(args, cfg)
    res = run_ablation(job, w, cfg.prior())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in res.pop("outputs").items():
        imageio.write_ppm(out / f"stage_{name}.ppm", img)
    _write_json(args.report or out / "ablation.json", res)
    for name, m in res["stages"].items():
        print(f"({name}) masked_err_out={m['masked_err_out']:.3e} mean_color_dist={m['mean_color_dist']}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    try:
        steps = [int(x) for x in args.steps.split(",")]
    except ValueError:
        raise ConfigError(f"--steps expects comma-separated integers, got {args.steps!r}") from None
    seed = _seed(args, cfg)
    weights = cfg.load_weights() if args.flow == "dit" else None
    scene = cfg.scenes()[0] if args.flow == "dit" else None
    res = bench_solver(args.flow, args.a, steps, seed, weights, args.ref_steps, scene)
    print(format_table(res))
    if args.json:
        _write_json(args.json, res)
    return 0


def cmd_selftest(args) -> int:
    return 0 if run_selftest(sys.stdout) else 1


COMMANDS = {
    "synth": cmd_synth, "invert": cmd_invert, "reconstruct": cmd_reconstruct,
    "transfer": cmd_transfer, "ablate": cmd_ablate, "bench-solver": cmd_bench,
    "selftest": cmd_selftest,
}


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"error: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return _fail("UsageError", exc, 2)
    try:
        return COMMANDS[args.cmd](args)
    except TransferError as exc:
        return _fail(type(exc).__name__, exc, exc.exit_code)
    except OSError as exc:
        where = f" {exc.filename}" if exc.filename else ""
        return _fail("IOError", f"{exc.strerror or exc}{where}", 2)


if __name__ == "__main__":
    sys.exit(main())
