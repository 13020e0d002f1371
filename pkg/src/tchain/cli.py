"""Command line entry point ``tc``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import bench, conv
from .decompose import FitConfig, als_fit, fit_with_ss_control, init_model, masked_als_fit
from .model import read_tcm, reconstruct, sensitivity, write_tcm
from .stabilize import CorrectionConfig, intensity_correct, ssc_correct
from .tensor import read_tct, relative_error

log = logging.getLogger("tchain")

EXIT_CONFIG = 2
EXIT_IO = 3


class ConfigError(Exception):
    pass


def _ints(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from exc
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d


def _configs(path) -> tuple[FitConfig, CorrectionConfig]:
    """A config file holds ``fit``/``correction`` sections or plain fit keys."""
    d = _load_json(path)
    try:
        if "fit" in d or "correction" in d:
            extra = set(d) - {"fit", "correction"}
            if extra:
                raise ConfigError(f"unknown config sections: {sorted(extra)}")
            return FitConfig.from_dict(d.get("fit", {})), CorrectionConfig.from_dict(d.get("correction", {}))
        return FitConfig.from_dict(d), CorrectionConfig()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _write_json(path, obj) -> None:
    if path is None:
        print(json.dumps(obj, indent=2))
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)


def cmd_decompose(args) -> int:
    y = read_tct(args.tensor)
    cfg, ccfg = _configs(args.config)
    if len(args.bonds) != y.ndim:
        raise ConfigError(f"need {y.ndim} bond dimensions, got {len(args.bonds)}")
    mask = None
    if args.mask:
        mask = read_tct(args.mask) != 0
    m0 = init_model(y.shape, args.bonds, seed=cfg.seed, scheme=cfg.init_scheme, y=y)
    if args.solver == "als":
        m, rep = als_fit(y, m0, cfg) if mask is None else masked_als_fit(y, mask, m0, cfg)
    else:
        m, rep = fit_with_ss_control(y, m0, cfg, ccfg, mask=mask)
    if args.model_out:
        write_tcm(args.model_out, m)
    out = rep.to_dict()
    out["config"] = cfg.to_dict()
    _write_json(args.out, out)
    log.info("%s: rel err %.3e after %d iterations (%s)", args.solver, rep.final_error, rep.iterations,
             rep.termination)
    return 0


def cmd_correct(args) -> int:
    y = read_tct(args.tensor)
    m = read_tcm(args.model)
    _, ccfg = _configs(args.config)
    if args.delta == "auto":
        delta = None
    else:
        try:
            delta = float(args.delta)
        except ValueError as exc:
            raise ConfigError(f"--delta must be 'auto' or a number, got {args.delta!r}") from exc
    try:
        if args.intensity:
            m2, rep = intensity_correct(y, m, delta, ccfg)
        else:
            m2, rep = ssc_correct(y, m, delta, ccfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_tcm(args.out, m2)
    st = sensitivity(m2)
    log.info("ss %.4g -> %.4g, rel err %.3e", rep.sensitivity[0], st.sensitivity,
             relative_error(y, reconstruct(m2)))
    if args.report:
        _write_json(args.report, {"delta": rep.delta, "sensitivity": rep.sensitivity, "error": rep.error,
                                  "intensity": rep.intensity, "sweeps": rep.sweeps})
    return 0


def cmd_bench(args) -> int:
    try:
        cfg = bench.load_suite(args.suite)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        results = bench.run_suite(cfg, out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    for name, s in results.items():
        print(f"{name}: success {s.successes}/{len(s.records)} ({s.success_rate:.0%}), failed runs {s.n_failed}")
    return 0


def cmd_conv(args) -> int:
    w = read_tct(args.kernel)
    side = _load_json(args.sidecar) if args.sidecar else {}
    try:
        k = conv.ConvKernel(w, int(side.get("stride", 1)), int(side.get("padding", 0)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg, ccfg = _configs(args.config)
    if args.config is None:
        cfg = FitConfig(max_iters=500)
    entries = conv.rank_grid_search(k, args.flops_budget, args.err_threshold, args.grid, cfg, ccfg,
                                    n_starts=args.starts)
    if args.out:
        conv.write_grid_csv(entries, args.out)
    else:
        for e in entries:
            print(",".join(str(v) for v in e.row().values()))
    return 0


def cmd_image(args) -> int:
    img = bench.read_ppm(args.image)
    cfg, ccfg = _configs(args.config)
    if args.config is None:
        cfg = FitConfig(max_iters=300)
    grid = args.grid
    if any(len(g) != 2 for g in grid):
        raise ConfigError("image grid entries are R1,R2 pairs")
    rows = bench.image_fit_experiment(img, grid, seed=args.seed, cfg=cfg, ccfg=ccfg)
    if args.out:
        bench.write_rows_csv(rows, args.out)
    else:
        for r in rows:
            print(r)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tc", description="Tensor Chain decomposition with sensitivity control")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decompose", help="fit a chain model to a tensor")
    d.add_argument("tensor")
    d.add_argument("--bonds", type=_ints, required=True)
    d.add_argument("--solver", choices=["als", "ssctrl"], default="ssctrl")
    d.add_argument("--config")
    d.add_argument("--mask", help="TCT1 tensor, nonzero entries observed")
    d.add_argument("--out", help="JSON report path (stdout when omitted)")
    d.add_argument("--model-out", help="TCM1 path for the fitted model")
    d.set_defaults(func=cmd_decompose)

    c = sub.add_parser("correct", help="lower the sensitivity of a model under an error bound")
    c.add_argument("tensor")
    c.add_argument("model")
    c.add_argument("--delta", default="auto")
    c.add_argument("--config")
    c.add_argument("--intensity", action="store_true", help="correct intensity instead of sensitivity")
    c.add_argument("--out", required=True)
    c.add_argument("--report")
    c.set_defaults(func=cmd_correct)

    b = sub.add_parser("bench", help="run an experiment suite")
    b.add_argument("suite")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    k = sub.add_parser("conv", help="rank search for a convolution kernel")
    k.add_argument("kernel")
    k.add_argument("--grid", type=_ints, nargs="+", help="R1,R2,R3 triples (default grid when omitted)")
    k.add_argument("--flops-budget", type=float, default=math.inf)
    k.add_argument("--err-threshold", type=float, default=math.inf)
    k.add_argument("--starts", type=int, default=1, help="random starts per grid point (best kept)")
    k.add_argument("--sidecar", help="JSON with stride and padding")
    k.add_argument("--config")
    k.add_argument("--out")
    k.set_defaults(func=cmd_conv)

    i = sub.add_parser("image", help="fit an RGB image with bonds (R1, R2, R1)")
    i.add_argument("image")
    i.add_argument("--grid", type=_ints, nargs="+", required=True, help="R1,R2 pairs")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--config")
    i.add_argument("--out")
    i.set_defaults(func=cmd_image)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"tc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"tc: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed input files surface as ValueError from the readers
        print(f"tc: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
