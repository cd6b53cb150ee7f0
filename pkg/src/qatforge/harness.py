"""Experiment runner: training from scratch under a plan, sweeps, timing."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .data import Dataset, TaskConfig, gen_synthetic
from .model import STRATEGIES, Encoder, EncoderConfig, LayerQuantPlan, build_encoder
from .quant import CONFIGS, spec_from_name

log = logging.getLogger(__name__)

SWEEP_LABELS = tuple(CONFIGS)
LR_SCHEDULES = ("constant", "cosine")
BENCH_PATHS = {"float": "Float", "native": "I4W", "fake": "FakeI4W"}

DEFAULT_SWEEP_MODELS = {
    "large": {"model_dim": 32, "num_heads": 4, "blocks": [1], "ffn_expansion": 2},
    "small": {"model_dim": 12, "num_heads": 2, "blocks": [1], "ffn_expansion": 2},
}
DEFAULT_TASK = {"vocab_size": 24, "seq_len": 12, "num_classes": 6, "window": 8, "n_train": 4096, "n_eval": 2048}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1200
    batch_size: int = 64
    lr: float = 0.03
    momentum: float = 0.9
    seed: int = 0
    schedule: str = "cosine"  # lr * (1 + cos(pi * step / steps)) / 2, or "constant"

    def __post_init__(self):
        if self.schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.schedule!r}; choose from {', '.join(LR_SCHEDULES)}")
        if self.steps < 1 or self.batch_size < 1 or not self.lr > 0 or not 0 <= self.momentum < 1:
            raise ValueError("need steps >= 1, batch_size >= 1, lr > 0 and 0 <= momentum < 1")

    def lr_at(self, step: int, steps: int) -> float:
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))
        return self.lr


@dataclass(frozen=True)
class PlanConfig:
    """Strategy name plus its parameters.

    ``uniform`` uses ``config``; the mixed strategies use ``spec4`` for the
    selected layers and ``spec_default`` for the rest.
    """

    strategy: str = "uniform"
    config: str = "Float"
    k: Optional[int] = None
    pass_index: Optional[int] = None
    spec4: str = "I4W"
    spec_default: str = "I8W"
    label: Optional[str] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown plan strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")

    @property
    def display(self) -> str:
        if self.label:
            return self.label
        if self.strategy == "uniform":
            return self.config
        if self.strategy == "first_k":
            return f"first_{self.k}"
        if self.strategy == "per_pass":
            return f"pass_{self.pass_index}"
        return self.strategy

    def build(self, model: Encoder) -> LayerQuantPlan:
        fn = STRATEGIES[self.strategy]
        if self.strategy == "uniform":
            return fn(model, spec_from_name(self.config))
        s4, sd = spec_from_name(self.spec4), spec_from_name(self.spec_default)
        if self.strategy == "first_k":
            if self.k is None:
                raise ValueError("first_k plan needs k")
            return fn(model, self.k, s4, sd)
        if self.strategy == "per_pass":
            if self.pass_index is None:
                raise ValueError("per_pass plan needs pass_index")
            return fn(model, self.pass_index, s4, sd)
        return fn(model, s4, sd)


def _model_config(d: dict, task: TaskConfig) -> EncoderConfig:
    d = dict(d)
    d.setdefault("vocab_size", task.vocab_size)
    d.setdefault("num_classes", task.num_classes)
    d.setdefault("max_len", max(64, task.seq_len))
    cfg = EncoderConfig.from_dict(d)
    if cfg.vocab_size != task.vocab_size or cfg.num_classes != task.num_classes:
        raise ValueError("model vocab_size/num_classes must match the task")
    return cfg


@dataclass(frozen=True)
class ExperimentConfig:
    model: EncoderConfig
    plan: PlanConfig = PlanConfig()
    train: TrainConfig = TrainConfig()
    task: TaskConfig = TaskConfig(**DEFAULT_TASK)
    output_dir: Optional[str] = None
    model_label: str = "model"
    sweep_models: dict = field(default_factory=lambda: dict(DEFAULT_SWEEP_MODELS))
    sweep_plans: tuple = ()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        task = TaskConfig(**d.get("task", DEFAULT_TASK))
        model = _model_config(d.get("model", DEFAULT_SWEEP_MODELS["large"]), task)
        sweep = d.get("sweep", {})
        return cls(
            model=model,
            plan=PlanConfig(**d.get("plan", {})),
            train=TrainConfig(**d.get("train", {})),
            task=task,
            output_dir=d.get("output", {}).get("dir"),
            model_label=d.get("model_label", "model"),
            sweep_models=sweep.get("models", dict(DEFAULT_SWEEP_MODELS)),
            sweep_plans=tuple(PlanConfig(**p) for p in sweep.get("plans", ())),
        )

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "plan": asdict(self.plan),
            "train": asdict(self.train),
            "task": asdict(self.task),
            "output": {"dir": self.output_dir},
            "model_label": self.model_label,
            "sweep": {"models": self.sweep_models, "plans": [asdict(p) for p in self.sweep_plans]},
        }

    def with_model(self, label: str, model: dict) -> "ExperimentConfig":
        return replace(self, model=_model_config(model, self.task), model_label=label)


@dataclass
class ResultRow:
    label: str
    model: str
    seed: int
    initial_loss: float = math.nan
    final_loss: float = math.nan
    eval_accuracy: float = math.nan
    pass_accuracies: tuple = ()
    model_bytes: int = 0
    ms_per_step: float = math.nan
    error: str = ""

    CSV_FIELDS = ("label", "model", "seed", "initial_loss", "final_loss", "eval_accuracy",
                  "pass_accuracies", "model_bytes", "ms_per_step", "error")

    def csv_row(self) -> dict:
        d = asdict(self)
        d["pass_accuracies"] = ";".join(f"{a:.4f}" for a in self.pass_accuracies)
        return d

    def deterministic_fields(self) -> tuple:
        return (self.label, self.model, self.seed, self.initial_loss, self.final_loss,
                self.eval_accuracy, tuple(self.pass_accuracies), self.model_bytes, self.error)


@dataclass
class TrainedRun:
    row: ResultRow
    model: Encoder
    plan: LayerQuantPlan
    losses: list[float]
    checkpoint_path: Optional[Path] = None


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled minibatch indices, reshuffled each epoch."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i:i + batch_size]


def evaluate(model: Encoder, x: np.ndarray, y: np.ndarray, batch_size: int) -> list[float]:
    """Per-pass accuracy, evaluated in fixed-size batches."""
    correct = None
    for i in range(0, len(x), batch_size):
        preds = model.predict(x[i:i + batch_size])
        hits = [int((p == y[i:i + batch_size]).sum()) for p in preds]
        correct = hits if correct is None else [a + b for a, b in zip(correct, hits)]
    return [c / len(x) for c in correct]


def train(cfg: ExperimentConfig, dataset: Optional[Dataset] = None, steps: Optional[int] = None,
          step_times: Optional[list] = None) -> TrainedRun:
    """Train from scratch with quantization active from the first step."""
    tc = cfg.train
    ds = dataset if dataset is not None else gen_synthetic(cfg.task, tc.seed)
    model = build_encoder(cfg.model, tc.seed)
    plan = cfg.plan.build(model)
    model.apply_plan(plan)
    params = model.parameters
    opt = ad.SGDMomentum(params, tc.lr, tc.momentum)
    rng = np.random.default_rng(tc.seed + 1)
    feed = batches(len(ds.x_train), tc.batch_size, rng)
    losses = []
    row = ResultRow(cfg.plan.display, cfg.model_label, tc.seed)
    n_steps = tc.steps if steps is None else steps
    for step in range(n_steps):
        opt.lr = np.float32(tc.lr_at(step, n_steps))
        idx = next(feed)
        t0 = time.perf_counter()
        ad.zero_grad(params)
        # overflow shows up as a non-finite loss or gradient and is reported below
        with ad.Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
            loss = model.loss(ds.x_train[idx], ds.y_train[idx])
        value = float(loss.value)
        if not math.isfinite(value):
            row.error = f"non-finite loss {value} at step {step}"
            break
        with np.errstate(over="ignore", invalid="ignore"):
            tape.backward(loss)
        try:
            opt.step()
        except FloatingPointError as e:
            row.error = f"step {step}: {e}"
            break
        if step_times is not None:
            step_times.append(time.perf_counter() - t0)
        losses.append(value)
    return TrainedRun(row, model, plan, losses)


def run_experiment(cfg: ExperimentConfig, save_checkpoint: bool = True) -> TrainedRun:
    """Train, evaluate and (optionally) checkpoint one configuration."""
    ds = gen_synthetic(cfg.task, cfg.train.seed)
    times: list[float] = []
    run = train(cfg, ds, step_times=times)
    row = run.row
    if run.losses:
        row.initial_loss = run.losses[0]
        row.final_loss = float(np.mean(run.losses[-10:]))
        row.ms_per_step = float(np.median(times)) * 1e3
    if row.error:
        log.warning("%s/%s seed %d failed: %s", row.model, row.label, row.seed, row.error)
        return run
    accs = evaluate(run.model, ds.x_eval, ds.y_eval, cfg.train.batch_size)
    row.pass_accuracies = tuple(accs)
    row.eval_accuracy = accs[-1]
    if save_checkpoint and cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{row.model}_{row.label}_seed{row.seed}.qat"
        ledger = checkpoint.save(run.model, run.plan, path)
        run.checkpoint_path = path
    else:
        ledger = checkpoint.model_size_report(run.model, run.plan)
    row.model_bytes = ledger.payload_bytes
    return run


def _sweep_job(args) -> ResultRow:
    cfg_dict, save = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        return run_experiment(cfg, save_checkpoint=save).row
    except Exception as e:  # recorded, sweep continues
        log.exception("sweep job failed")
        return ResultRow(cfg.plan.display, cfg.model_label, cfg.train.seed, error=f"{type(e).__name__}: {e}")


def sweep_jobs(base: ExperimentConfig, seeds: Sequence[int]) -> list[ExperimentConfig]:
    plans = [PlanConfig(strategy="uniform", config=name) for name in SWEEP_LABELS] + list(base.sweep_plans)
    jobs = []
    for seed in seeds:
        for label, model in base.sweep_models.items():
            for plan in plans:
                cfg = replace(base.with_model(label, model), plan=plan, train=replace(base.train, seed=seed))
                if base.output_dir:
                    cfg = replace(cfg, output_dir=str(Path(base.output_dir) / "checkpoints"))
                jobs.append(cfg)
    return jobs


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("QATFORGE_THREADS", "1")))
    except ValueError:
        raise ValueError("QATFORGE_THREADS must be an integer") from None


def sweep(base: ExperimentConfig, seeds: Sequence[int] = (0,), save_checkpoints: bool = True) -> list[ResultRow]:
    """Every precision config (plus any extra plans) for every sweep model and seed."""
    jobs = [(cfg.to_dict(), save_checkpoints) for cfg in sweep_jobs(base, seeds)]
    workers = min(max_workers(), len(jobs))
    if workers == 1:
        rows = []
        for job in jobs:
            rows.append(_sweep_job(job))
            r = rows[-1]
            log.info("%s %s seed=%d acc=%.4f", r.model, r.label, r.seed, r.eval_accuracy)
        return rows
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_job, jobs))


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=ResultRow.CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.csv_row())
    return out.getvalue()


def rows_to_table(rows: Sequence[ResultRow]) -> str:
    header = ("model", "seed", "config", "acc", "loss", "bytes", "ms/step")
    body = [
        (r.model, str(r.seed), r.label, f"{r.eval_accuracy:.4f}", f"{r.final_loss:.4f}",
         str(r.model_bytes), f"{r.ms_per_step:.1f}" + (f"  ERROR: {r.error}" if r.error else ""))
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(line, widths)) for line in body]
    return "\n".join(lines) + "\n"


def accuracy_table(rows: Sequence[ResultRow]) -> dict:
    """``{(model, seed): {label: accuracy}}``."""
    out: dict = {}
    for r in rows:
        out.setdefault((r.model, r.seed), {})[r.label] = r.eval_accuracy
    return out


@dataclass(frozen=True)
class OrderingChecks:
    """Per-seed results of the qualitative precision/accuracy orderings."""

    int8_close: dict  # seed -> bool
    i4wa_worst: dict
    small_degrades_more: dict

    @staticmethod
    def majority(d: dict) -> bool:
        """More than half of the seeds pass (2 of 3)."""
        return 2 * sum(bool(v) for v in d.values()) > len(d)


def ordering_checks(rows: Sequence[ResultRow], large: str = "large", small: str = "small",
                    tolerance: float = 0.02) -> OrderingChecks:
    acc = accuracy_table(rows)
    seeds = sorted({seed for (_, seed) in acc})
    close, worst, degrade = {}, {}, {}
    for s in seeds:
        L, S = acc[(large, s)], acc[(small, s)]
        close[s] = all(abs(L[c] - L["Float"]) <= tolerance for c in ("I8W", "I8WA"))
        others = [L[c] for c in SWEEP_LABELS if c != "I4WA"]
        worst[s] = all(L["I4WA"] < v for v in others)
        degrade[s] = (S["Float"] - S["I4W"]) >= (L["Float"] - L["I4W"])
    return OrderingChecks(close, worst, degrade)


def bench_timing(cfg: ExperimentConfig, steps: int = 20, warmup: int = 3) -> list[dict]:
    """Median wall-clock per training step for the float, native and fake paths.

    Reported only; the ratios depend entirely on the hardware.
    """
    if steps < 1 or warmup < 0:
        raise ValueError("bench needs steps >= 1 and warmup >= 0")
    ds = gen_synthetic(cfg.task, cfg.train.seed)
    medians = {}
    for path, config in BENCH_PATHS.items():
        times: list[float] = []
        run_cfg = replace(cfg, plan=PlanConfig(strategy="uniform", config=config))
        train(run_cfg, ds, steps=warmup + steps, step_times=times)
        medians[path] = float(np.median(times[warmup:])) * 1e3
    return [
        {"path": p, "median_ms": medians[p], "ratio_vs_float": medians[p] / medians["float"]}
        for p in BENCH_PATHS
    ]


def bench_to_csv(rows: Sequence[dict]) -> str:
    out = io.StringIO()
    out.write("path,median_ms,ratio_vs_float\n")
    for r in rows:
        out.write(f"{r['path']},{r['median_ms']:.4f},{r['ratio_vs_float']:.4f}\n")
    return out.getvalue()
