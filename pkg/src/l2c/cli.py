"""Command-line entry point.

Exit codes: 0 success, 1 internal or numeric failure, 2 invalid input,
3 success with a degenerate-input flag (calibration target not bracketed).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import tensor_io as tio
from . import toy_decoder as td
from .distribution import corpus_stats, softmax
from .lcdm import lcdm_pipeline
from .otsu import otsu_report_grid, rank_profile
from .synth import KINDS, render_dataset, synth_corpus

log = logging.getLogger("l2c")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_FLAGGED = 0, 1, 2, 3


class InputError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {path}")
    return p


def _load_tensor(path: str, ndim: int | None = None) -> np.ndarray:
    try:
        arr = tio.read_tensor(_existing(path))
    except tio.TensorFormatError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if ndim is not None and arr.ndim != ndim:
        raise InputError(f"{path}: expected a {ndim}-d tensor, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError(f"{path}: non-finite values")
    return arr


def _load_json(path: str) -> dict:
    try:
        with open(_existing(path), encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _out_path(path: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    grid = _load_tensor(args.logits, ndim=2)
    if args.probs:
        probs = grid
    elif args.params:
        probs = cal.apply_calibration(grid, _read_params(args.params))
    else:
        probs = softmax(grid)
    top_n = min(30, probs.shape[1]) if args.top_n is None else args.top_n
    if not 1 <= top_n <= probs.shape[1]:
        raise InputError(f"--top-n {top_n} must lie in [1, K={probs.shape[1]}]")
    report = otsu_report_grid(probs, weighting=args.otsu_weight)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tio.dump_json(out / "report.json", report.to_dict(per_token=args.per_token))
    profile = rank_profile([probs], top_n)
    with open(out / "rank_profile.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rank", "mean_prob"])
        for i, v in enumerate(profile, start=1):
            w.writerow([i, repr(float(v))])
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def _read_params(path: str) -> cal.CalibrationParams:
    try:
        return cal.params_from_dict(_load_json(path))
    except (ValueError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def cmd_calibrate(args) -> int:
    corpus = [_load_tensor(p, ndim=2) for p in args.corpus]
    try:
        config = tio.parse_stats_config(_load_json(args.config)) if args.config else tio.StatsConfig()
    except (ValueError, TypeError, KeyError) as exc:
        raise InputError(f"{args.config}: {exc}") from exc
    if args.target_stats:
        try:
            target = tio.read_target_stats(_existing(args.target_stats))
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise InputError(f"{args.target_stats}: {exc}") from exc
    elif args.target_logits:
        target = corpus_stats([softmax(_load_tensor(p, ndim=2)) for p in args.target_logits])
    elif config.target_stats is not None:
        target = config.target_stats
    else:
        raise InputError("no target statistics: pass --target-stats, --target-logits or a config with target_stats")

    res = cal.calibrate_search(corpus, config, target)
    diag = res.diagnostics()
    diag["non_bracketed"] = not res.bisection.bracketed
    cal.write_params(_out_path(args.out), res.params, diag)
    print(f"final loss {res.loss:.6e}")
    if not res.bisection.bracketed:
        print("warning: target entropy not bracketed by the scale range", file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


def cmd_map(args) -> int:
    logits = _load_tensor(args.logits, ndim=2)
    codebook = _load_tensor(args.codebook, ndim=2)
    params = _read_params(args.params)
    if logits.shape[1] != codebook.shape[0]:
        raise InputError(f"logits have K={logits.shape[1]} but codebook has K={codebook.shape[0]}")
    v, u = lcdm_pipeline(logits, codebook, params)
    tio.write_tensor(_out_path(args.out_v), v)
    tio.write_tensor(_out_path(args.out_u), u)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1 or args.k < 2:
        raise InputError(f"need --n >= 1 and --k >= 2, got n={args.n}, k={args.k}")
    if args.kind == "render":
        return _synth_render(args)
    tio.write_tensor(_out_path(args.out), synth_corpus(args.kind, args.n, args.k, args.seed, d=args.d))
    return EXIT_OK


def _synth_render(args) -> int:
    d = 4 if args.d is None else args.d
    ds = render_dataset(args.n, args.seed, k=args.k, d=d, latent_hw=(args.latent, args.latent))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tio.write_tensor(out / "z.l2c", ds.z)
    tio.write_tensor(out / "v.l2c", ds.v)
    tio.write_tensor(out / "u.l2c", ds.u)
    tio.write_tensor(out / "codebook.l2c", ds.codebook)
    tio.dump_json(out / "meta.json", {"grid_shape": list(ds.grid_shape), "seed": args.seed})
    return EXIT_OK


def load_render_dir(path: str):
    root = _existing(path)
    meta = _load_json(str(root / "meta.json"))
    z = _load_tensor(str(root / "z.l2c"), ndim=4)
    v = _load_tensor(str(root / "v.l2c"), ndim=3)
    u = _load_tensor(str(root / "u.l2c"), ndim=3)
    if not z.shape[0] == v.shape[0] == u.shape[0]:
        raise InputError("z, v and u hold different sample counts")
    return list(zip(z, v, u)), tuple(meta["grid_shape"])


def save_params(out: Path, params: td.DenoiserParams) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for k, v in params.as_dict().items():
        tio.write_tensor(out / f"{k}.l2c", v)


def load_params(path: str) -> td.DenoiserParams:
    root = _existing(path)
    return td.DenoiserParams.from_dict({k: _load_tensor(str(root / f"{k}.l2c")) for k in td.DenoiserParams.names()})


def cmd_toy_train(args) -> int:
    items, grid_shape = load_render_dir(args.data)
    if args.first is not None:
        items = items[: args.first]
    opts = _load_json(args.config) if args.config else {}
    if args.steps is not None:
        opts["steps"] = args.steps
    if args.seed is not None:
        opts["seed"] = args.seed
    try:
        config = td.TrainConfig.from_dict(opts)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad training config: {exc}") from exc
    res = td.train(items, grid_shape, config)
    out = Path(args.out)
    save_params(out, res.params)
    tio.dump_json(out / "train_config.json", config.to_dict())
    with open(out / "loss_trace.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(res.losses):
            w.writerow([i, repr(float(v))])
    first, last = td.smoothed_reduction(res.losses)
    print(f"smoothed loss {first:.6f} -> {last:.6f}")
    return EXIT_OK


def cmd_toy_decode(args) -> int:
    items, grid_shape = load_render_dir(args.data)
    items = items[args.skip:]
    if not items:
        raise InputError("no samples left after --skip")
    schedule = td.NoiseSchedule(args.steps)
    params = None if args.oracle else load_params(args.params)
    samples, mse_c, mse_0 = [], [], []
    for j, (z, v, u) in enumerate(items):
        seed = args.seed + j
        if args.oracle:
            # constant true velocity of the straight path from this draw to z
            vel = td.initial_noise(z.shape, seed) - z
            out = td.sample(None, schedule, None, seed, z.shape, velocity_fn=lambda zz, tt: vel)
        else:
            hh, ww, _ = z.shape
            c = td.build_conditioning(v, u, params, grid_shape, (hh // 2, ww // 2))
            out = td.sample(c, schedule, params, seed, z.shape)
            z0 = td.sample(np.zeros_like(c), schedule, params, seed, z.shape)
            mse_0.append(float(np.mean((z0 - z) ** 2)))
        samples.append(out)
        mse_c.append(float(np.mean((out - z) ** 2)))
    tio.write_tensor(_out_path(args.out), np.stack(samples))
    report = {"steps": args.steps, "n_samples": len(samples), "conditioned_mse": float(np.mean(mse_c))}
    if mse_0:
        report["zero_conditioning_mse"] = float(np.mean(mse_0))
    if args.report:
        tio.dump_json(_out_path(args.report), report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="l2c", description="Logit-to-code statistics, calibration and toy decoding")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="probability and Otsu statistics of a logit grid")
    p.add_argument("logits")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--otsu-weight", choices=("count", "mass"), default="count")
    p.add_argument("--top-n", type=int, default=None, help="ranks in the profile CSV (default min(30, K))")
    p.add_argument("--probs", action="store_true", help="input rows are already probabilities")
    p.add_argument("--params", help="calibration params applied before analysis")
    p.add_argument("--per-token", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("calibrate", help="fit calibration params to target statistics")
    p.add_argument("corpus", nargs="+")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--target-stats")
    g.add_argument("--target-logits", nargs="+")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("map", help="expected code vectors and uncertainty features")
    p.add_argument("logits")
    p.add_argument("codebook")
    p.add_argument("params")
    p.add_argument("--out-v", required=True)
    p.add_argument("--out-u", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("synth", help="seeded synthetic corpora")
    p.add_argument("out")
    p.add_argument("--kind", choices=KINDS + ("render",), required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--k", type=int, default=16384)
    p.add_argument("--d", type=int, default=None, help="code dimension (cosine: 8, render: 4)")
    p.add_argument("--latent", type=int, default=8, help="render: latent height/width")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("toy-train", help="train the toy decoder on a rendered dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--first", type=int, help="train on the first N samples only")
    p.set_defaults(func=cmd_toy_train)

    p = sub.add_parser("toy-decode", help="Euler-sample latents from conditioning")
    p.add_argument("--data", required=True)
    p.add_argument("--params")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip", type=int, default=0, help="skip the first N samples (held-out split)")
    p.add_argument("--oracle", action="store_true", help="use the true velocity instead of the network")
    p.set_defaults(func=cmd_toy_decode)
    return ap


def _thread_limit():
    n = os.environ.get("L2C_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "toy-decode" and not args.oracle and not args.params:
        print("error: --params is required unless --oracle is given", file=sys.stderr)
        return EXIT_INPUT
    if args.command == "synth" and args.kind == "cosine" and args.d is None:
        args.d = 8
    try:
        with _thread_limit():
            return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except td.NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
