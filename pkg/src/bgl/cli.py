"""``bgl`` command line: synth, verify, compare, transfer.

Exit codes: 0 success, 1 a check failed, 2 configuration or IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, with_seed
from .tensorio import TensorFormatError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("bgl")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed {text} does not fit in u64")
    return v


def cmd_synth(cfg: ExperimentConfig, out: Path) -> int:
    from .lowlight.synth import save_dataset, synthesize_dataset

    ds = synthesize_dataset(cfg.pipeline.synth_config(cfg.run.data_seed))
    save_dataset(ds, out, png=cfg.run.figures)
    gains = ds.gains
    lo, hi = cfg.pipeline.gain_range
    log.info("wrote %d images to %s (gain %.4f..%.4f)", len(ds), out, gains.min(), gains.max())
    if not ((gains >= lo) & (gains <= hi)).all():
        log.error("sampled gains fall outside the configured range")
        return EXIT_CHECK
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, out: Path, **estimators) -> int:
    from .records import write_csv
    from .verify import run_suite

    report = run_suite(cfg.verify, cfg.estimator, **estimators)
    out.mkdir(parents=True, exist_ok=True)
    body = report.to_json()
    body["config_hash"] = cfg.hash()
    (out / "verify.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    write_csv(out / "delta_sweep.csv", report.delta_rows, ["seed", "delta", "fd_error", "roundoff", "ratio"])
    write_csv(out / "k_sweep.csv", report.k_rows, ["seed", "k", "rel_error"])
    if cfg.run.figures:
        from . import plotting

        plotting.delta_sweep(report.delta_rows, out / "figures" / "delta_sweep.png")
        plotting.k_sweep(report.k_rows, out / "figures" / "k_sweep.png")
    for c in report.checks:
        log.info(c.line())
    if not report.passed:
        for c in report.checks:
            if not c.passed:
                log.error("FAILED %s: %s", c.id, ", ".join(c.failing_cases) or c.detail)
        return EXIT_CHECK
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, out: Path) -> int:
    from .experiments import run_compare

    res = run_compare(cfg, out, log=log.info)
    if not all(r.check() for r in res.records):
        log.error("a run record summary does not match its rows")
        return EXIT_CHECK
    for row in res.summary + res.baseline_summary:
        log.info("%-9s psnr %.3f +- %.3f  ssim %.4f  l1 %.4f", row["strategy"], row["psnr_mean"], row["psnr_std"],
                 row["ssim_mean"], row["l1_mean"])
    return EXIT_OK


def cmd_transfer(cfg: ExperimentConfig, out: Path) -> int:
    from .experiments import run_transfer

    res = run_transfer(cfg, out, log=log.info)
    for row in res.summary:
        log.info("%-7s l1 %.5f +- %.5f  psnr %.3f", row["strategy"], row["l1_mean"], row["l1_std"], row["psnr_mean"])
    if not res.all_frozen:
        log.error("frozen generative block parameters changed during transfer")
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "verify": cmd_verify, "compare": cmd_compare, "transfer": cmd_transfer}
HELP = {
    "synth": "synthesize the toy RAW/RGB dataset",
    "verify": "run the estimator invariant suite",
    "compare": "train naive, tbgl and ibgl on the enhancement task",
    "transfer": "freeze trained generative blocks and train a denoising head",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bgl", description="Bilevel generative learning toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", type=Path, default=None, help="INI config file (defaults if omitted)")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=_u64, default=None, help="override the run seed (data seed for synth)")
        sp.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        cfg = with_seed(load_config(args.config), args.seed, data=args.command == "synth")
        return COMMANDS[args.command](cfg, args.out)
    except (ConfigError, OSError, TensorFormatError, json.JSONDecodeError, KeyError) as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
