"""Run records: per-step metric rows plus a summary derivable from them.

A record is self-describing: ``summarize(rows)`` recomputes the stored
summary exactly, and :func:`RunRecord.check` asserts it.  Rows are plain
dicts with an integer ``step``; the final held-out evaluation is a row with
``phase == "eval"`` placed after the last training step.
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

COUNTER_KEYS = ("lf_grad_evals", "lg_grad_evals", "lower_updates", "outer_updates")
METRIC_KEYS = ("psnr", "ssim", "l1")
WALL_CLOCK_KEYS = ("wall_clock_s",)


def build_id() -> str:
    """Package version plus the git commit of the working tree, if any."""
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).resolve().parent)
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"bgl-{__version__}" + (f"+{rev}" if rev else "")


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def summarize(rows: list[dict]) -> dict:
    """Final losses, counters and held-out metrics taken from ``rows``."""
    train = [r for r in rows if r.get("phase") == "outer"]
    evals = [r for r in rows if r.get("phase") == "eval"]
    out: dict = {"outer_steps": len(train)}
    if train:
        last = train[-1]
        for key in ("upper_loss", "lower_loss"):
            vals = [r[key] for r in train if key in r]
            if vals:
                out[f"final_{key}"] = vals[-1]
        for key in COUNTER_KEYS:
            if key in last:
                out[key] = last[key]
    if evals:
        for key in METRIC_KEYS:
            if key in evals[-1]:
                out[key] = evals[-1][key]
    return {k: _clean(v) for k, v in out.items()}


@dataclass
class RunRecord:
    name: str
    config_hash: str
    rows: list[dict] = field(default_factory=list)
    build: str = field(default_factory=build_id)
    wall_clock_s: float = 0.0
    meta: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def finalize(self) -> "RunRecord":
        steps = [r["step"] for r in self.rows]
        if any(b < a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"record {self.name}: rows are not monotone in step")
        self.summary = summarize(self.rows)
        return self

    def check(self) -> bool:
        return summarize(self.rows) == self.summary

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "config_hash": self.config_hash,
            "build": self.build,
            "platform": platform.python_version(),
            "meta": self.meta,
            "summary": self.summary,
            "rows": [{k: _clean(v) for k, v in r.items()} for r in self.rows],
            "wall_clock_s": self.wall_clock_s,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        d = json.loads(Path(path).read_text())
        return cls(d["name"], d["config_hash"], d["rows"], d["build"], d["wall_clock_s"], d["meta"], d["summary"])


def rows_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    """Rows as CSV text; missing cells are left empty.  Floats use ``repr``."""
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str | Path, rows: list[dict], columns: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rows_csv(rows, columns))
    return path
