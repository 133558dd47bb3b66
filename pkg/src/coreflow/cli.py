"""Command-line entry point: ``coreflow <subcommand> ...``.

Exit codes: 0 success, 2 usage/config errors, 3 data errors, 4 numerical aborts.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import io as cfio
from .baselines import default_prior, niw_fit, niw_sample, pcaflow_fit, pcaflow_generate
from .data import CoreBatch, MatrixBatch, mat
from .errors import (BoundInapplicable, CholeskyFailure, ConfigError, CoreFlowError, NonFiniteLoss,
                     NonFiniteState, RankDeficient)
from .flow import decode, extract_cores, sample_cores, train_flow
from .metrics import evaluate
from .patch import PatchSpec, patchify, plan, unpatchify
from .pipeline import flow_config, run_pipeline, stage1_config, synth_config
from .stage1 import train_stage1
from .synth import apply_mask, generate, ground_truth

log = logging.getLogger("coreflow")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
NUMERIC_ERRORS = (NonFiniteLoss, NonFiniteState, RankDeficient, CholeskyFailure, BoundInapplicable)

# flag name -> (config section, key)
FLAG_MAP = {
    "case": ("data", "case"), "m1": ("data", "m1"), "m2": ("data", "m2"), "rank": ("data", "rank"),
    "n": ("data", "n"), "seed": ("data", "seed"), "p_miss": ("data", "p_miss"),
    "mask_seed": ("data", "mask_seed"), "n_test": ("data", "n_test"), "test_seed": ("data", "test_seed"),
    "patch": ("data", "patch"),
    "s1_steps": ("stage1", "steps"), "lr_u": ("stage1", "lr_u"), "lr_v": ("stage1", "lr_v"),
    "s1_batch_size": ("stage1", "batch_size"), "epochs": ("stage1", "epochs"), "s1_seed": ("stage1", "seed"),
    "s1_log_stride": ("stage1", "log_stride"),
    "flow_steps": ("flow", "steps"), "flow_lr": ("flow", "lr"), "flow_batch_size": ("flow", "batch_size"),
    "hidden": ("flow", "hidden"), "time_dim": ("flow", "time_dim"), "flow_seed": ("flow", "seed"),
    "ode_steps": ("flow", "ode_steps"), "flow_log_stride": ("flow", "log_stride"),
    "n_gen": ("eval", "n_gen"), "sample_seed": ("eval", "sample_seed"), "repeats": ("eval", "repeats"),
    "kappa0": ("baseline", "kappa0"), "nu0": ("baseline", "nu0"), "psi0_scale": ("baseline", "psi0_scale"),
    "baseline_seed": ("baseline", "seed"),
}


def _default(name):
    section, key = FLAG_MAP[name]
    return cfio.DEFAULT_CONFIG[section][key]


def _add(p, flag, name, type_=None, help_="", **kw):
    default = _default(name)
    p.add_argument(flag, dest=name, type=type_, default=None, help=f"{help_} (default: {default})".strip(), **kw)


def _hidden(text: str):
    return [int(x) for x in text.split(",") if x]


def _add_data(p, with_mask=False):
    _add(p, "--case", "case", str, "synthetic case: blobs|bands|waves|crosshatch")
    p.add_argument("--m", type=int, default=None, help="set both m1 and m2")
    _add(p, "--m1", "m1", int, "rows")
    _add(p, "--m2", "m2", int, "columns")
    _add(p, "--rank", "rank", int, "rank R")
    _add(p, "--n", "n", int, "number of training matrices")
    _add(p, "--seed", "seed", int, "data seed")
    if with_mask:
        _add(p, "--p-miss", "p_miss", float, "missing-entry probability")
        _add(p, "--mask-seed", "mask_seed", int, "mask seed")


def _add_stage1(p):
    _add(p, "--s1-steps", "s1_steps", int, "Stiefel steps per epoch")
    _add(p, "--epochs", "epochs", int, "outer fill epochs (masked data)")
    _add(p, "--lr-u", "lr_u", float, "U step size, scaled by 1/mean||M||_F^2")
    _add(p, "--lr-v", "lr_v", float, "V step size, scaled by 1/mean||M||_F^2")
    _add(p, "--s1-batch-size", "s1_batch_size", int, "Stage-I mini-batch size; omit for full batch")
    _add(p, "--s1-seed", "s1_seed", int, "Stage-I batch-order seed")
    _add(p, "--s1-log-stride", "s1_log_stride", int, "loss-trace stride")


def _add_flow(p):
    _add(p, "--flow-steps", "flow_steps", int, "flow optimizer steps")
    _add(p, "--flow-lr", "flow_lr", float, "Adam learning rate")
    _add(p, "--flow-batch-size", "flow_batch_size", int, "flow mini-batch size")
    _add(p, "--hidden", "hidden", _hidden, "comma-separated hidden widths")
    _add(p, "--time-dim", "time_dim", int, "time-embedding width (even)")
    _add(p, "--flow-seed", "flow_seed", int, "flow seed")
    _add(p, "--ode-steps", "ode_steps", int, "RK4 grid points from t=1 to t=0")
    _add(p, "--flow-log-stride", "flow_log_stride", int, "loss-trace stride")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coreflow", description="Low-rank core-space flow generation for matrices.")
    parser.add_argument("--version", action="version", version=f"coreflow {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config with sections data/stage1/flow/eval/baseline")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap (default: $COREFLOW_THREADS or 1)")
    common.add_argument("--no-manifest-timing", action="store_true", help="omit wall-clock fields from the run manifest")
    common.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic batch and its true subspaces")
    _add_data(p)
    p.add_argument("--out", type=Path, required=True, help="output batch file")
    p.add_argument("--truth", type=Path, help="output ground-truth subspace file")

    p = sub.add_parser("mask", parents=[common], help="draw a uniform observation mask for a batch")
    p.add_argument("--data", type=Path, required=True, help="input batch file")
    _add(p, "--p-miss", "p_miss", float, "missing-entry probability")
    _add(p, "--seed", "mask_seed", int, "mask seed")
    p.add_argument("--out", type=Path, required=True, help="output mask file")

    p = sub.add_parser("train-subspaces", parents=[common], help="Stage I: learn (U, V)")
    p.add_argument("--data", type=Path, required=True, help="input batch file")
    p.add_argument("--mask", type=Path, help="observation mask file")
    _add(p, "--rank", "rank", int, "rank R")
    _add_stage1(p)
    p.add_argument("--out", type=Path, required=True, help="output subspace file")
    p.add_argument("--trace", type=Path, help="loss-trace CSV")
    p.add_argument("--filled", type=Path, help="output filled-in batch (masked input only)")

    p = sub.add_parser("train-flow", parents=[common], help="Stage II: train the core-space flow")
    p.add_argument("--data", type=Path, required=True, help="complete or filled batch file")
    p.add_argument("--subspaces", type=Path, required=True, help="subspace file")
    _add_flow(p)
    p.add_argument("--out", type=Path, required=True, help="output flow file")
    p.add_argument("--trace", type=Path, help="loss-trace CSV")

    p = sub.add_parser("sample", parents=[common], help="generate matrices from a trained flow")
    p.add_argument("--flow", type=Path, required=True, help="flow file")
    p.add_argument("--subspaces", type=Path, required=True, help="subspace file")
    _add(p, "--n", "n_gen", int, "number of matrices")
    _add(p, "--seed", "sample_seed", int, "sampling seed")
    _add(p, "--ode-steps", "ode_steps", int, "RK4 grid points")
    p.add_argument("--out", type=Path, required=True, help="output batch file")
    p.add_argument("--cores-out", type=Path, help="also write generated cores as an R x R batch")

    p = sub.add_parser("evaluate", parents=[common], help="compare a generated batch with a true batch")
    p.add_argument("--true", dest="true_path", type=Path, required=True, help="reference batch file")
    p.add_argument("--gen", type=Path, required=True, help="generated batch file")
    p.add_argument("--subspaces", type=Path, help="learned subspace file (for principal angles)")
    p.add_argument("--truth", type=Path, help="ground-truth subspace file (for principal angles)")
    p.add_argument("--out", type=Path, required=True, help="output JSON report")

    p = sub.add_parser("baseline-smg", parents=[common], help="SMG-Core: NIW core model on fixed subspaces")
    p.add_argument("--data", type=Path, required=True, help="complete or filled batch file")
    p.add_argument("--subspaces", type=Path, required=True, help="subspace file")
    _add(p, "--n", "n_gen", int, "number of matrices")
    _add(p, "--kappa0", "kappa0", float, "prior mean strength")
    _add(p, "--nu0", "nu0", float, "prior degrees of freedom; omitted means d + 2")
    _add(p, "--psi0-scale", "psi0_scale", float, "prior scale Psi0 = c I")
    _add(p, "--seed", "baseline_seed", int, "sampling seed")
    p.add_argument("--out", type=Path, required=True, help="output batch file")
    p.add_argument("--posterior", type=Path, help="write the fitted posterior as JSON")

    p = sub.add_parser("baseline-pcaflow", parents=[common], help="PCA-Flow: flattened PCA plus the same flow")
    p.add_argument("--data", type=Path, required=True, help="complete batch file")
    p.add_argument("--mask", type=Path, help="observation mask (rejected unless all observed)")
    _add(p, "--rank", "rank", int, "rank R; PCA keeps at most R^2 components")
    _add_flow(p)
    _add(p, "--n", "n_gen", int, "number of matrices")
    _add(p, "--seed", "sample_seed", int, "sampling seed")
    p.add_argument("--out", type=Path, required=True, help="output batch file")

    p = sub.add_parser("patchify", parents=[common], help="rearrange p x p tiles into patch rows")
    p.add_argument("--data", type=Path, required=True, help="input batch file")
    p.add_argument("--p", type=int, help="patch side; default round((H W)^(1/4))")
    p.add_argument("--out", type=Path, required=True, help="output patch batch")

    p = sub.add_parser("unpatchify", parents=[common], help="invert patchify using the stored patch spec")
    p.add_argument("--data", type=Path, required=True, help="patch batch (needs patch metadata)")
    p.add_argument("--out", type=Path, required=True, help="output batch on the cropped domain")

    p = sub.add_parser("pipeline", parents=[common], help="generate, mask, Stage I, Stage II, sample, evaluate")
    _add_data(p, with_mask=True)
    _add(p, "--n-test", "n_test", int, "held-out reference size")
    _add(p, "--test-seed", "test_seed", int, "held-out data seed")
    p.add_argument("--patch", dest="patch", action="store_const", const=True, default=None,
                   help="patchify before Stage I (default: False)")
    _add_stage1(p)
    _add_flow(p)
    _add(p, "--n-gen", "n_gen", int, "generated matrices per repeat")
    _add(p, "--sample-seed", "sample_seed", int, "sampling seed")
    _add(p, "--repeats", "repeats", int, "repeats with shifted flow/sample seeds")
    p.add_argument("--out-dir", type=Path, required=True, help="output directory")
    return parser


def resolve_config(args) -> dict:
    cfg = cfio.load_config(getattr(args, "config", None))
    if getattr(args, "m", None) is not None:
        cfg["data"]["m1"] = cfg["data"]["m2"] = args.m
    for name, (section, key) in FLAG_MAP.items():
        value = getattr(args, name, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


class Manifest:
    def __init__(self, args, cfg, argv):
        self.record = {
            "command": ["coreflow", *argv],
            "subcommand": args.command,
            "config": cfg,
            "config_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
            "inputs": {}, "outputs": {}, "version": __version__,
            "python": platform.python_version(), "numpy": np.__version__,
        }
        self.timing = not args.no_manifest_timing
        self.t0 = time.time()

    def seeds(self, **kw):
        self.record.setdefault("seeds", {}).update(kw)

    def inp(self, **kw):
        self.record["inputs"].update({k: str(v) for k, v in kw.items() if v is not None})

    def out(self, **kw):
        self.record["outputs"].update({k: str(v) for k, v in kw.items() if v is not None})

    def write(self, path: Path):
        rec = dict(self.record)
        if self.timing:
            rec["timings"] = {"started": self.t0, "seconds": time.time() - self.t0}
        cfio._atomic_write(path, (json.dumps(rec, indent=2, sort_keys=True) + "\n").encode())


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args, cfg, man):
    scfg = synth_config(cfg)
    batch, U0, V0 = generate(scfg)
    cfio.write_batch(args.out, batch)
    if args.truth:
        cfio.write_subspaces(args.truth, ground_truth(scfg))
    man.seeds(data=scfg.seed)
    man.out(batch=args.out, truth=args.truth)
    return args.out


def cmd_mask(args, cfg, man):
    batch = cfio.read_batch(args.data)
    masked = apply_mask(batch, float(cfg["data"]["p_miss"]), int(cfg["data"]["mask_seed"]))
    cfio.write_mask(args.out, masked.mask)
    man.seeds(mask=int(cfg["data"]["mask_seed"]))
    man.inp(data=args.data)
    man.out(mask=args.out)
    return args.out


def cmd_train_subspaces(args, cfg, man):
    batch = cfio.read_masked_batch(args.data, args.mask)
    res = train_stage1(batch, stage1_config(cfg))
    cfio.write_subspaces(args.out, res.pair)
    if args.trace:
        cfio.write_trace(args.trace, res.trace)
    if args.filled and res.filled is not None:
        cfio.write_batch(args.filled, MatrixBatch(res.filled.matrices, meta=batch.meta))
    man.seeds(stage1=int(cfg["stage1"]["seed"]))
    man.inp(data=args.data, mask=args.mask)
    man.out(subspaces=args.out, trace=args.trace, filled=args.filled)
    return args.out


def cmd_train_flow(args, cfg, man):
    batch = cfio.read_batch(args.data)
    pair = cfio.read_subspaces(args.subspaces)
    fcfg = flow_config(cfg)
    net, trace = train_flow(extract_cores(batch, pair), fcfg)
    cfio.write_flow(args.out, net)
    if args.trace:
        cfio.write_trace(args.trace, trace)
    man.seeds(flow=fcfg.seed)
    man.inp(data=args.data, subspaces=args.subspaces)
    man.out(flow=args.out, trace=args.trace)
    return args.out


def cmd_sample(args, cfg, man):
    net = cfio.read_flow(args.flow)
    pair = cfio.read_subspaces(args.subspaces)
    seed = int(cfg["eval"]["sample_seed"])
    cores = sample_cores(net, int(cfg["eval"]["n_gen"]), int(cfg["flow"]["ode_steps"]), seed)
    cfio.write_batch(args.out, decode(cores, pair))
    if args.cores_out:
        cfio.write_batch(args.cores_out, MatrixBatch(cores.matrices()))
    man.seeds(sample=seed)
    man.inp(flow=args.flow, subspaces=args.subspaces)
    man.out(batch=args.out, cores=args.cores_out)
    return args.out


def cmd_evaluate(args, cfg, man):
    true_b = cfio.read_batch(args.true_path)
    gen_b = cfio.read_batch(args.gen)
    pair = cfio.read_subspaces(args.subspaces) if args.subspaces else None
    truth = cfio.read_subspaces(args.truth) if args.truth else None
    report = evaluate(true_b, gen_b, pair, truth)
    cfio._atomic_write(args.out, report.to_json().encode())
    man.inp(true=args.true_path, gen=args.gen, subspaces=args.subspaces, truth=args.truth)
    man.out(report=args.out)
    return args.out


def cmd_baseline_smg(args, cfg, man):
    batch = cfio.read_batch(args.data)
    pair = cfio.read_subspaces(args.subspaces)
    b = cfg["baseline"]
    cores = extract_cores(batch, pair)
    post = niw_fit(cores, default_prior(cores.d, b["kappa0"], b["nu0"], b["psi0_scale"]))
    x = niw_sample(post, int(cfg["eval"]["n_gen"]), int(b["seed"]))
    cfio.write_batch(args.out, decode(CoreBatch(x, pair.rank), pair))
    if args.posterior:
        doc = {"kappa": post.kappa, "nu": post.nu, "mu": post.mu.tolist(), "psi": post.psi.tolist()}
        cfio._atomic_write(args.posterior, (json.dumps(doc) + "\n").encode())
    man.seeds(baseline=int(b["seed"]))
    man.inp(data=args.data, subspaces=args.subspaces)
    man.out(batch=args.out, posterior=args.posterior)
    return args.out


def cmd_baseline_pcaflow(args, cfg, man):
    batch = cfio.read_masked_batch(args.data, args.mask)
    R = int(cfg["data"]["rank"])
    model = pcaflow_fit(batch, R * R)
    fcfg = flow_config(cfg)
    gen = pcaflow_generate(model, fcfg, int(cfg["eval"]["n_gen"]), int(cfg["eval"]["sample_seed"]))
    cfio.write_batch(args.out, gen)
    man.seeds(flow=fcfg.seed, sample=int(cfg["eval"]["sample_seed"]))
    man.inp(data=args.data, mask=args.mask)
    man.out(batch=args.out)
    return args.out


def cmd_patchify(args, cfg, man):
    batch = cfio.read_batch(args.data)
    H, W = batch.shape
    spec = PatchSpec(H, W, args.p) if args.p else plan(H, W)
    if spec.p < 1 or spec.p > min(H, W):
        raise ConfigError(f"patch side {spec.p} invalid for {H}x{W}")
    cfio.write_batch(args.out, MatrixBatch(patchify(batch.data, spec), meta={**batch.meta, **spec.to_meta()}))
    man.inp(data=args.data)
    man.out(batch=args.out)
    return args.out


def cmd_unpatchify(args, cfg, man):
    batch = cfio.read_batch(args.data)
    try:
        spec = PatchSpec.from_meta(batch.meta)
    except KeyError as exc:
        raise cfio.FormatError("batch has no patch metadata") from exc
    meta = {k: v for k, v in batch.meta.items() if not k.startswith("patch_")}
    cfio.write_batch(args.out, MatrixBatch(unpatchify(batch.data, spec), meta=meta))
    man.inp(data=args.data)
    man.out(batch=args.out)
    return args.out


def cmd_pipeline(args, cfg, man):
    out_dir: Path = args.out_dir
    res = run_pipeline(cfg)
    cfio.write_subspaces(out_dir / "subspaces.cfss", res.stage1.pair)
    cfio.write_trace(out_dir / "stage1_trace.csv", res.stage1.trace)
    for r, (net, trace, gen) in enumerate(zip(res.nets, res.flow_traces, res.generated)):
        cfio.write_flow(out_dir / f"flow_{r}.cfnn", net)
        cfio.write_trace(out_dir / f"flow_trace_{r}.csv", trace)
        cfio.write_batch(out_dir / f"generated_{r}.cfmb", gen)
    report = out_dir / "report.json"
    cfio._atomic_write(report, (json.dumps(res.summary(), indent=2, sort_keys=True) + "\n").encode())
    man.seeds(data=cfg["data"]["seed"], test=cfg["data"]["test_seed"], mask=cfg["data"]["mask_seed"],
              stage1=cfg["stage1"]["seed"], flow=cfg["flow"]["seed"], sample=cfg["eval"]["sample_seed"])
    man.out(dir=out_dir, report=report)
    return out_dir / "manifest"


COMMANDS = {
    "gen-data": cmd_gen_data, "mask": cmd_mask, "train-subspaces": cmd_train_subspaces,
    "train-flow": cmd_train_flow, "sample": cmd_sample, "evaluate": cmd_evaluate,
    "baseline-smg": cmd_baseline_smg, "baseline-pcaflow": cmd_baseline_pcaflow,
    "patchify": cmd_patchify, "unpatchify": cmd_unpatchify, "pipeline": cmd_pipeline,
}


def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else int(os.environ.get("COREFLOW_THREADS", "1"))
    try:
        cfg = resolve_config(args)
        man = Manifest(args, cfg, argv)
        man.record["threads"] = threads
        with _thread_limit(threads):
            target = COMMANDS[args.command](args, cfg, man)
        man.write(_manifest_path(Path(target)))
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, CoreFlowError) and not isinstance(exc, ConfigError):
            return _fail(exc)
        print(f"coreflow: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CoreFlowError, OSError) as exc:
        return _fail(exc)
    return 0


def _fail(exc) -> int:
    code = EXIT_NUMERIC if isinstance(exc, NUMERIC_ERRORS) else EXIT_DATA
    kind = "numerical abort" if code == EXIT_NUMERIC else "data error"
    print(f"coreflow: {kind}: {type(exc).__name__}: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
