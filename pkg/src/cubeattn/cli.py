"""``cubeattn`` command line.

Machine-readable results go to stdout (JSON, CSV), human logs to stderr.
Every subcommand accepts ``--config FILE.json``; explicit flags override
file values and unknown keys are rejected. Exit codes: 0 success, 1 check
failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import check as checks
from . import flops, io, kernels
from .attention import MATERIALIZE_CAP, JointBlockMask, MaskTooLargeError, materialize_mask
from .latent_grid import CubeDims, GridDims, build_partition
from .rope3d import RopeParams, proxy_scale_factors, rope_angles

log = logging.getLogger("cubeattn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config keys or values; mapped to exit code 2."""


# option tables: dest -> default. Only these keys are accepted in --config files.
OPTIONS = {
    "partition": {"grid": None, "cube": None},
    "mask": {"grid": None, "cube": None, "radius": 1, "n_global": 0, "policy": "full", "metric": "chebyshev",
             "out": "."},
    "flops": {"presets": None, "grid": None, "cube": "4,8,8", "radius": 1, "n_global": 0, "head_dim": 128,
              "heads": 1, "policy": "full", "metric": "chebyshev", "name": "custom", "rt_sweep": None,
              "proxy_tokens": 32760, "d_total": 1536},
    "rope-check": {"head_dim": 16, "proxy": "2,4,4", "target": "8,16,16", "base": 10000.0},
    "train": {"stage": 2, "steps": 500, "seed": 0, "out": None, "data_seed": 0, "dataset_size": 64,
              "eval_size": 8, "r_t": 4.0, "policy": None, "freeze_ffn": None, "backend": None, "model": None},
    "sample": {"weights": None, "out": None, "steps": 20, "seed": 0, "cfg_scale": None, "no_cfg": False,
               "proxy": None, "prompt_id": 0, "backend": None},
    "check": {"inject_fault": False, "only": None},
}


def _resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    table = OPTIONS[args.command]
    file_vals = {}
    if args.config:
        try:
            file_vals = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_vals, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(file_vals) - set(table))
        if unknown:
            raise UsageError(f"unknown config keys for '{args.command}': {unknown}")
    out = {}
    for key, default in table.items():
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            out[key] = flag
        elif key in file_vals:
            out[key] = file_vals[key]
        else:
            out[key] = default
    return out


def _triple(cls, value, what):
    if value is None:
        raise UsageError(f"--{what} is required")
    try:
        return cls.parse(value) if isinstance(value, str) else cls(*value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid --{what} {value!r}: {exc}") from exc


def _partition(opts):
    grid = _triple(GridDims, opts["grid"], "grid")
    cube = _triple(CubeDims, opts["cube"], "cube")
    try:
        return build_partition(grid, cube)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# subcommands -----------------------------------------------------------------

def cmd_partition(opts) -> int:
    part = _partition(opts)
    json.dump(part.to_json_dict(), sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_mask(opts) -> int:
    part = _partition(opts)
    try:
        m = JointBlockMask(part, int(opts["n_global"]), int(opts["radius"]), opts["policy"], opts["metric"])
        dense = materialize_mask(m)
    except MaskTooLargeError as exc:
        raise UsageError(f"refusing to materialise: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    allowed = dense == 0
    n, total = m.n_detail, m.n_total
    summary = {
        "n_detail": n,
        "n_global": m.n_global,
        "allowed_entries": int(allowed.sum()),
        "density": float(allowed.sum()) / total**2,
        "global_to_detail_forbidden": bool(not allowed[n:, :n].any()),
        "layout": "rows are queries, cube-reordered detail tokens first; 1 = allowed",
    }
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"P1\n{total} {total}\n"] + [" ".join("1" if a else "0" for a in row) + "\n" for row in allowed]
    (out / "mask.pbm").write_text("".join(lines))
    (out / "mask.json").write_text(json.dumps(summary, indent=2) + "\n")
    json.dump(summary, sys.stdout)
    sys.stdout.write("\n")
    log.info("wrote %s and %s (cap %d tokens)", out / "mask.pbm", out / "mask.json", MATERIALIZE_CAP)
    return EXIT_OK


def cmd_flops(opts) -> int:
    try:
        if opts["rt_sweep"] is not None:
            rows = flops.stage1_sweep(int(opts["rt_sweep"]), int(opts["proxy_tokens"]), int(opts["d_total"]))
        elif opts["grid"] is not None:
            cfg = flops.CostConfig(
                name=opts["name"],
                grid=_triple(GridDims, opts["grid"], "grid"),
                cube=_triple(CubeDims, opts["cube"], "cube"),
                radius=int(opts["radius"]),
                n_global=int(opts["n_global"]),
                head_dim=int(opts["head_dim"]),
                heads=int(opts["heads"]),
                detail_to_global=opts["policy"],
                metric=opts["metric"],
            )
            rows = flops.flops_table([cfg])
        else:
            rows = flops.flops_table(flops.load_presets(opts["presets"]))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read presets: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sys.stdout.write(flops.to_csv(rows))
    log.info("convention: %s", flops.CONVENTION)
    for r in rows:
        if r.assumptions:
            log.info("%s: %s", r.name, r.assumptions)
    if opts["rt_sweep"] is None:
        best, gap = flops.closest_to_reference(rows)
        log.info("closest row to the %.1fx reference: %s at %.1fx (gap %.1f)",
                 flops.REFERENCE_MAX_RATIO, best.name, best.ratio, gap)
    return EXIT_OK


def cmd_rope_check(opts) -> int:
    proxy = _triple(GridDims, opts["proxy"], "proxy")
    target = _triple(GridDims, opts["target"], "target")
    try:
        params = RopeParams(int(opts["head_dim"]), base=float(opts["base"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    scales = proxy_scale_factors(proxy, target)
    coords = np.stack(np.meshgrid(*(np.arange(v) for v in proxy.as_tuple()), indexing="ij"), -1).reshape(-1, 3)
    scaled = rope_angles(params.with_scales(scales), coords)
    unit = rope_angles(params, coords * np.array(scales))
    err = float(np.max(np.abs(scaled - unit)))
    json.dump({"max_alignment_error": err, "scales": list(scales), "axis_split": list(params.axis_split),
               "proxy_tokens": proxy.n_tokens}, sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def _model_config(opts):
    from .dit.model import ToyDiTConfig

    try:
        cfg = ToyDiTConfig.from_dict(opts["model"] or {})
        changes = {}
        if opts.get("policy") is not None:
            changes["policy"] = opts["policy"]
        if opts.get("freeze_ffn") is not None:
            changes["freeze_ffn"] = bool(opts["freeze_ffn"])
        return ToyDiTConfig.from_dict({**cfg.to_dict(), **changes})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


def cmd_train(opts) -> int:
    from .dit.data import make_synthetic_dataset
    from .dit.model import init_weights
    from .dit.train import train_stage1, train_stage2

    if opts["out"] is None:
        raise UsageError("--out is required")
    stage, steps, seed = int(opts["stage"]), int(opts["steps"]), int(opts["seed"])
    if stage not in (1, 2) or steps < 0:
        raise UsageError("--stage must be 1 or 2 and --steps >= 0")
    cfg = _model_config(opts)
    if cfg.proxy_grid is None:
        raise UsageError("model config needs a proxy_grid")
    data = make_synthetic_dataset(int(opts["data_seed"]), cfg.grid, cfg.proxy_grid, int(opts["dataset_size"]),
                                  cfg.channels, cfg.n_prompts)
    held_out = make_synthetic_dataset(int(opts["data_seed"]) + 1, cfg.grid, cfg.proxy_grid, int(opts["eval_size"]),
                                      cfg.channels, cfg.n_prompts)
    run_cfg = cfg.stage1(float(opts["r_t"])) if stage == 1 else cfg
    init = init_weights(run_cfg, seed)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    io.write_weights(out / "init.avw", init, run_cfg.to_dict())
    if stage == 1:
        res = train_stage1(cfg, data, steps, seed, r_t=float(opts["r_t"]), eval_dataset=held_out, init=init,
                           backend=opts["backend"])
    else:
        res = train_stage2(cfg, data, steps, seed, eval_dataset=held_out, init=init, backend=opts["backend"])
    io.write_weights(out / "weights.avw", res.weights, run_cfg.to_dict())
    io.write_loss_csv(out / "loss.csv", res.loss_trace)
    summary = {"stage": stage, "steps": steps, "seed": seed, "initial_eval": res.initial_eval,
               "final_eval": res.final_eval, "ratio": res.final_eval / res.initial_eval}
    json.dump(summary, sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_sample(opts) -> int:
    from .dit.model import ToyDiT, ToyDiTConfig
    from .dit.sample import sample_euler

    if opts["weights"] is None or opts["out"] is None:
        raise UsageError("--weights and --out are required")
    if opts["no_cfg"] and opts["cfg_scale"] is not None:
        raise UsageError("--no-cfg and --cfg-scale are exclusive")
    try:
        weights, cfg_dict = io.read_weights(opts["weights"])
        cfg = ToyDiTConfig.from_dict(cfg_dict)
        proxy = io.read_latent(opts["proxy"]).astype(np.float64) if opts["proxy"] else None
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if proxy is not None and (cfg.proxy_grid is None or proxy.shape != cfg.proxy_grid.as_tuple() + (cfg.channels,)):
        raise UsageError(f"proxy shape {proxy.shape} does not match the model config")
    model = ToyDiT(cfg, weights, backend=opts["backend"])
    scale = None if opts["no_cfg"] or opts["cfg_scale"] is None else float(opts["cfg_scale"])
    try:
        video = sample_euler(model, int(opts["steps"]), scale, proxy, int(opts["seed"]), int(opts["prompt_id"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    io.write_latent(opts["out"], video)
    log.info("wrote %s %s", opts["out"], video.shape)
    return EXIT_OK


def cmd_check(opts) -> int:
    only = opts["only"]
    if isinstance(only, str):
        only = [s for s in only.split(",") if s]
    if only and set(only) - set(checks.CHECKS):
        raise UsageError(f"unknown checks {sorted(set(only) - set(checks.CHECKS))}; have {list(checks.CHECKS)}")
    log.info("kernel backends: %s (default %s)", kernels.available(), kernels.DEFAULT)
    results = checks.run_checks(fault=bool(opts["inject_fault"]), only=only)
    print(checks.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {
    "partition": cmd_partition,
    "mask": cmd_mask,
    "flops": cmd_flops,
    "rope-check": cmd_rope_check,
    "train": cmd_train,
    "sample": cmd_sample,
    "check": cmd_check,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cubeattn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option values; flags override it")

    sp = sub.add_parser("partition", help="dump the cube partition as JSON")
    common(sp)
    sp.add_argument("--grid", help="t,h,w")
    sp.add_argument("--cube", help="ct,ch,cw")

    sp = sub.add_parser("mask", help="write the joint mask as PBM plus a JSON summary")
    common(sp)
    sp.add_argument("--grid")
    sp.add_argument("--cube")
    sp.add_argument("--radius", type=int)
    sp.add_argument("--n-global", type=int)
    sp.add_argument("--policy", choices=["full", "none"])
    sp.add_argument("--metric", choices=["chebyshev", "face"])
    sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("flops", help="attention FLOPs table as CSV")
    common(sp)
    sp.add_argument("--presets", help="preset JSON file (default: shipped presets)")
    sp.add_argument("--grid", help="single config instead of presets: token grid t,h,w")
    sp.add_argument("--cube")
    sp.add_argument("--radius", type=int)
    sp.add_argument("--n-global", type=int)
    sp.add_argument("--head-dim", type=int)
    sp.add_argument("--heads", type=int)
    sp.add_argument("--policy", choices=["full", "none"])
    sp.add_argument("--metric", choices=["chebyshev", "face"])
    sp.add_argument("--name")
    sp.add_argument("--rt-sweep", type=int, metavar="R", help="stage-1 sweep r_t = 1..R")
    sp.add_argument("--proxy-tokens", type=int)
    sp.add_argument("--d-total", type=int)

    sp = sub.add_parser("rope-check", help="max proxy-anchor alignment error as one JSON line")
    common(sp)
    sp.add_argument("--head-dim", type=int)
    sp.add_argument("--proxy", help="proxy grid t,h,w")
    sp.add_argument("--target", help="target grid T,H,W")
    sp.add_argument("--base", type=float)

    sp = sub.add_parser("train", help="train the toy model on synthetic data")
    common(sp)
    sp.add_argument("--stage", type=int, choices=[1, 2])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--data-seed", type=int)
    sp.add_argument("--dataset-size", type=int)
    sp.add_argument("--eval-size", type=int)
    sp.add_argument("--r-t", type=float, help="stage-1 temporal RoPE dilation")
    sp.add_argument("--policy", choices=["full", "none"])
    sp.add_argument("--freeze-ffn", action="store_const", const=True)
    sp.add_argument("--backend", choices=kernels.available())

    sp = sub.add_parser("sample", help="Euler-sample a latent video (AVT1)")
    common(sp)
    sp.add_argument("--weights")
    sp.add_argument("--out")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--cfg-scale", type=float)
    sp.add_argument("--no-cfg", action="store_true")
    sp.add_argument("--proxy", help="AVT1 proxy latent")
    sp.add_argument("--prompt-id", type=int)
    sp.add_argument("--backend", choices=kernels.available())

    sp = sub.add_parser("check", help="run the oracle and invariant suite")
    common(sp)
    sp.add_argument("--inject-fault", action="store_true", help="test hook: corrupt the adjacency")
    sp.add_argument("--only", help="comma-separated check names")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        opts = _resolve(args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"cubeattn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
