"""End-to-end two-stage run on a synthetic benchmark."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import MatrixBatch, StiefelPair
from .flow import FlowConfig, VelocityNet, decode, extract_cores, sample_cores, train_flow
from .metrics import MetricsReport, evaluate
from .patch import PatchSpec, crop, patchify, plan, unpatchify
from .stage1 import Stage1Config, Stage1Result, train_stage1
from .synth import SynthConfig, apply_mask, generate, ground_truth

log = logging.getLogger(__name__)


def stage1_config(cfg: dict) -> Stage1Config:
    s = cfg["stage1"]
    return Stage1Config(rank=int(cfg["data"]["rank"]), steps=int(s["steps"]), lr_u=float(s["lr_u"]),
                        lr_v=float(s["lr_v"]), batch_size=s["batch_size"], epochs=int(s["epochs"]),
                        seed=int(s["seed"]), log_stride=int(s["log_stride"]), early_stop=bool(s["early_stop"]),
                        stop_tol=float(s["stop_tol"]), stop_window=int(s["stop_window"]))


def flow_config(cfg: dict, seed_offset: int = 0) -> FlowConfig:
    f = cfg["flow"]
    return FlowConfig(steps=int(f["steps"]), lr=float(f["lr"]), batch_size=int(f["batch_size"]),
                      hidden=tuple(int(h) for h in f["hidden"]), time_dim=int(f["time_dim"]),
                      seed=int(f["seed"]) + seed_offset, ode_steps=int(f["ode_steps"]),
                      log_stride=int(f["log_stride"]))


def synth_config(cfg: dict, test: bool = False) -> SynthConfig:
    d = cfg["data"]
    return SynthConfig(case=d["case"], m1=int(d["m1"]), m2=int(d["m2"]), rank=int(d["rank"]),
                       n=int(d["n_test"] if test else d["n"]), seed=int(d["test_seed"] if test else d["seed"]))


@dataclass
class PipelineResult:
    train: MatrixBatch
    test: MatrixBatch
    stage1: Stage1Result
    nets: list[VelocityNet] = field(default_factory=list)
    flow_traces: list = field(default_factory=list)
    generated: list[MatrixBatch] = field(default_factory=list)
    reports: list[MetricsReport] = field(default_factory=list)
    patch: PatchSpec | None = None

    def summary(self) -> dict:
        runs = [r.to_dict() for r in self.reports]
        keys = runs[0].keys()
        mean = {k: float(np.mean([r[k] for r in runs])) for k in keys}
        std = {k: float(np.std([r[k] for r in runs])) for k in keys}
        return {"metrics": mean, "std": std, "repeats": len(runs), "runs": runs}


def run_pipeline(cfg: dict, repeats: int | None = None) -> PipelineResult:
    """Generate data, optionally mask/patchify, learn ``(U, V)``, train the flow,
    sample and evaluate against a held-out complete batch."""
    repeats = int(cfg["eval"]["repeats"] if repeats is None else repeats)
    train, _, _ = generate(synth_config(cfg))
    test, _, _ = generate(synth_config(cfg, test=True))
    truth: StiefelPair | None = ground_truth(synth_config(cfg))
    spec = None
    work = train
    if cfg["data"]["patch"]:
        spec = plan(*train.shape)
        work = MatrixBatch(patchify(train.data, spec), meta=spec.to_meta())
        truth = None
    p_miss = float(cfg["data"]["p_miss"])
    if p_miss > 0:
        work = apply_mask(work, p_miss, int(cfg["data"]["mask_seed"]))
    res1 = train_stage1(work, stage1_config(cfg))
    fitted = MatrixBatch(res1.filled.matrices) if res1.filled is not None else work
    cores = extract_cores(fitted, res1.pair)
    out = PipelineResult(train, test, res1, patch=spec)
    reference = MatrixBatch(crop(test.data, spec)) if spec is not None else test
    for r in range(repeats):
        fcfg = flow_config(cfg, r)
        net, trace = train_flow(cores, fcfg)
        gen = decode(sample_cores(net, int(cfg["eval"]["n_gen"]), fcfg.ode_steps, int(cfg["eval"]["sample_seed"]) + r), res1.pair)
        if spec is not None:
            gen = MatrixBatch(unpatchify(gen.data, spec))
        out.nets.append(net)
        out.flow_traces.append(trace)
        out.generated.append(gen)
        out.reports.append(evaluate(reference, gen, res1.pair, truth))
        log.info("repeat %d: %s", r, out.reports[-1].to_dict())
    return out
