"""Drivers behind the ``compare`` and ``transfer`` commands.

Outputs (all under ``out``):

* ``records/<strategy>_seed<s>.json``: full RunRecord per run;
* ``metrics.csv``: one final row per run, no wall-clock fields, so two runs
  with the same config are byte-identical;
* ``summary.csv`` / ``summary.json``: mean and std over seeds per strategy;
* ``checkpoints/<strategy>_seed<s>/{omega,theta}``: trained parameters.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .lowlight.synth import Dataset, load_dataset, synthesize_dataset
from .lowlight.tasks import EnhancementTask, HeadTrainConfig, fixed_gb_baseline, freeze_and_transfer
from .records import COUNTER_KEYS, METRIC_KEYS, RunRecord, write_csv
from .solvers import SolverConfig, solve
from .tensorio import load_parameters, save_parameters

RUN_COLUMNS = ["strategy", "seed", *METRIC_KEYS, "final_upper_loss", "final_lower_loss", *COUNTER_KEYS]


def get_dataset(cfg: ExperimentConfig, seed: int | None = None) -> Dataset:
    """The configured dataset directory if set, else a fresh synthesis."""
    if cfg.run.dataset and seed is None:
        ds = load_dataset(cfg.run.dataset)
        if ds.clean.shape[-1] != cfg.pipeline.image_size:
            raise ConfigError(f"dataset image size {ds.clean.shape[-1]} != pipeline image_size {cfg.pipeline.image_size}")
        return ds
    return synthesize_dataset(cfg.pipeline.synth_config(cfg.run.data_seed if seed is None else seed))


def solver_config(cfg: ExperimentConfig, strategy: str, seed: int) -> SolverConfig:
    c = cfg.compare
    return SolverConfig(
        estimator=strategy,
        k=c.ibgl_k if strategy == "ibgl" else 1,
        outer_steps=c.outer_steps,
        warm_steps=c.warm_steps,
        warm_lr=c.warm_lr,
        upper_lr_init=c.upper_lr_init,
        upper_lr_final=c.upper_lr_final,
        lower_lr_init=c.lower_lr_init,
        lower_lr_final=c.lower_lr_final,
        schedule=c.schedule,
        upper_optimizer=c.upper_optimizer,
        lower_optimizer=c.lower_optimizer,
        batch_size=c.batch_size,
        seed=seed,
        upper_clip=c.upper_clip,
        estimator_cfg=cfg.estimator,
    )


def aggregate(rows: list[dict], keys=METRIC_KEYS, group: str = "strategy") -> list[dict]:
    """Mean and population std per group, in first-seen group order."""
    order = list(dict.fromkeys(r[group] for r in rows))
    out = []
    for name in order:
        sel = [r for r in rows if r[group] == name]
        row = {group: name, "n_seeds": len(sel)}
        for k in keys:
            vals = np.array([r[k] for r in sel if k in r], dtype=float)
            if vals.size:
                row[f"{k}_mean"] = float(vals.mean())
                row[f"{k}_std"] = float(vals.std())
        out.append(row)
    return out


@dataclass
class CompareResult:
    records: list[RunRecord]
    run_rows: list[dict]
    summary: list[dict]
    baseline_rows: list[dict]
    baseline_summary: list[dict]


def run_compare(cfg: ExperimentConfig, out: str | Path, dataset: Dataset | None = None, log=print,
                figures: bool | None = None) -> CompareResult:
    out = Path(out)
    ds = get_dataset(cfg) if dataset is None else dataset
    chash = cfg.hash()
    records, run_rows, base_rows = [], [], []
    for seed in cfg.run.seeds:
        for strategy in cfg.compare.strategies:
            task = EnhancementTask(cfg.pipeline, ds, cfg.compare.batch_size, init_seed=cfg.run.init_seed + seed)
            problem = task.problem()
            scfg = solver_config(cfg, strategy, seed)
            t0 = time.perf_counter()
            state = solve(problem, scfg)
            metrics = task.evaluate(state.omega, state.theta, "test")
            wall = time.perf_counter() - t0
            rows = [r for r in state.history if r["phase"] == "outer"]
            rows = [r for r in rows if r["step"] % cfg.compare.log_every == 0 or r is rows[-1]]
            rows.append({"phase": "eval", "step": scfg.outer_steps, **metrics})
            name = f"{strategy}_seed{seed}"
            rec = RunRecord(name, chash, rows, wall_clock_s=wall,
                            meta={"strategy": strategy, "seed": seed, "k": scfg.k}).finalize()
            rec.save(out / "records" / f"{name}.json")
            omega, theta = state.params(problem)
            manifest = {"step": scfg.outer_steps, "config_hash": chash, "metrics": metrics, "strategy": strategy,
                        "seed": seed}
            save_parameters(out / "checkpoints" / name / "omega", omega, manifest)
            save_parameters(out / "checkpoints" / name / "theta", theta, manifest)
            records.append(rec)
            run_rows.append({"strategy": strategy, "seed": seed, **rec.summary})
            log(f"{name}: psnr={metrics['psnr']:.3f} ssim={metrics['ssim']:.4f} l1={metrics['l1']:.4f} "
                f"lg_evals={rec.summary.get('lg_grad_evals')} ({wall:.1f}s)")
        if cfg.compare.fixed_gb_baseline:
            task = EnhancementTask(cfg.pipeline, ds, cfg.compare.batch_size, init_seed=cfg.run.init_seed + seed)
            m = fixed_gb_baseline(task, _head(cfg, seed))
            base_rows.append({"strategy": "fixed_gb", "seed": seed, **m})
            log(f"fixed_gb_seed{seed}: psnr={m['psnr']:.3f} ssim={m['ssim']:.4f} l1={m['l1']:.4f}")

    summary = aggregate(run_rows, (*METRIC_KEYS, *COUNTER_KEYS))
    base_summary = aggregate(base_rows) if base_rows else []
    write_csv(out / "metrics.csv", run_rows, RUN_COLUMNS)
    write_csv(out / "summary.csv", summary)
    if base_rows:
        write_csv(out / "fixed_gb.csv", base_rows, ["strategy", "seed", *METRIC_KEYS])
    _dump(out / "summary.json", {"config_hash": chash, "strategies": summary, "fixed_gb": base_summary})
    (out / "config.ini").write_text(cfg.dumps())
    if cfg.run.figures if figures is None else figures:
        from . import plotting

        plotting.training_curves(records, out / "figures" / "upper_loss.png", "upper_loss")
        plotting.metric_bars(summary + base_summary, out / "figures" / "psnr.png")
    return CompareResult(records, run_rows, summary, base_rows, base_summary)


def _head(cfg: ExperimentConfig, seed: int) -> HeadTrainConfig:
    h = cfg.head
    return HeadTrainConfig(h.steps, h.batch_size, h.lr_init, h.lr_final, h.optimizer, seed=h.seed + seed)


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


@dataclass
class TransferOutcome:
    run_rows: list[dict]
    summary: list[dict]
    all_frozen: bool


def run_transfer(cfg: ExperimentConfig, out: str | Path, checkpoints: str | Path | None = None, log=print,
                 figures: bool | None = None) -> TransferOutcome:
    """Frozen-GB transfer to the denoising task for each checkpoint plus a random-init control."""
    out = Path(out)
    if not (checkpoints or cfg.transfer.checkpoints):
        raise ConfigError("no checkpoint directory given ([transfer] checkpoints)")
    ckpt_root = Path(checkpoints or cfg.transfer.checkpoints)
    if not ckpt_root.is_dir():
        raise FileNotFoundError(f"checkpoint directory not found: {ckpt_root}")
    # resolve every checkpoint first so a missing one fails before any training
    omegas = {}
    for seed in cfg.run.seeds:
        for strategy in cfg.transfer.strategies:
            path = ckpt_root / "checkpoints" / f"{strategy}_seed{seed}" / "omega"
            if not (path / "manifest.json").exists():
                path = ckpt_root / f"{strategy}_seed{seed}" / "omega"
            if not (path / "manifest.json").exists():
                raise FileNotFoundError(f"missing checkpoint for {strategy}, seed {seed} under {ckpt_root}")
            omegas[strategy, seed], _ = load_parameters(path)

    ds = synthesize_dataset(cfg.pipeline.synth_config(cfg.transfer.data_seed))
    rows, frozen_ok = [], True
    for seed in cfg.run.seeds:
        random_gb = EnhancementTask(cfg.pipeline, ds, init_seed=cfg.run.init_seed + seed).omega_init
        for label, omega in [*((s, omegas[s, seed]) for s in cfg.transfer.strategies), ("random", random_gb)]:
            t0 = time.perf_counter()
            res = freeze_and_transfer(omega, ds, cfg.pipeline, _head(cfg, seed), head_seed=seed)
            frozen_ok &= res.omega_unchanged
            rows.append({"strategy": label, "seed": seed, **res.metrics, "omega_unchanged": res.omega_unchanged})
            log(f"transfer {label}_seed{seed}: l1={res.metrics['l1']:.5f} psnr={res.metrics['psnr']:.3f} "
                f"({time.perf_counter() - t0:.1f}s)")
    summary = aggregate(rows)
    write_csv(out / "transfer_runs.csv", rows, ["strategy", "seed", *METRIC_KEYS, "omega_unchanged"])
    write_csv(out / "transfer_summary.csv", summary)
    _dump(out / "transfer_summary.json", {"config_hash": cfg.hash(), "rows": summary, "all_frozen": frozen_ok})
    if cfg.run.figures if figures is None else figures:
        from . import plotting

        plotting.metric_bars(summary, out / "figures" / "transfer_l1.png", "l1", "held-out L1")
    return TransferOutcome(rows, summary, frozen_ok)
