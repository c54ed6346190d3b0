"""Metric tables recomputed from run logs on disk.

Everything here is a pure function of the log files: the summary, the CSV and
the JSON results are byte-identical for identical logs, whatever produced them.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .metrics import HORIZONS, HULL_BIN_LABELS, evaluate_run, relative_improvement
from .pipeline import CooperationMode

MODE_ORDER = {m.value: i for i, m in enumerate(CooperationMode)}
SHORT_MODE = {
    "NoCooperation": "none",
    "CooperativePerceptionOnly": "perception",
    "CooperativePrediction": "prediction",
}


@dataclass
class RunRecord:
    label: str
    seed: int
    path: str          # relative to the output directory
    sha256: str
    config: dict
    metrics: dict

    @property
    def key(self) -> dict[str, Any]:
        c = self.config
        return {"mode": c["mode"], "delay": c["delay"], "compression": c["compression"], "seed": self.seed}


def collect(out: str | Path) -> tuple[list[RunRecord], list[str]]:
    """Load and evaluate every ``logs/<label>/seed_<n>.json``; unreadable files become error lines."""
    out = Path(out)
    records, errors = [], []
    for path in sorted((out / "logs").glob("*/seed_*.json")):
        rel = path.relative_to(out).as_posix()
        try:
            raw = path.read_bytes()
            log = json.loads(raw)
            seed = int(path.stem.split("_", 1)[1])
            rec = RunRecord(path.parent.name, seed, rel, hashlib.sha256(raw).hexdigest(), log["config"], evaluate_run(log))
        except (OSError, ValueError, KeyError, TypeError, IndexError) as exc:
            errors.append(f"{rel}: {type(exc).__name__}: {exc}")
            continue
        records.append(rec)
    records.sort(key=lambda r: (_variant_key(r), r.seed))
    return records, errors


def _variant_key(r: RunRecord):
    c = r.config
    return (MODE_ORDER.get(c["mode"], 99), bool(c["delay"]), float(c["compression"]), r.label)


def flatten(metrics: dict) -> dict[str, float]:
    out = {}
    for family, vals in metrics.items():
        for k, v in vals.items():
            if k == "hull_bins":
                for label, b in v.items():
                    out[f"{family}.hull[{label}].n"] = b["n"]
                    out[f"{family}.hull[{label}].sum"] = b["sum"]
            else:
                out[f"{family}.{k}"] = v
    return out


def _num(v) -> float:
    return float("nan") if v is None else float(v)


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_clean(v) for v in x]
    return x


# ----------------------------------------------------------------------------
# per-variant aggregation
# ----------------------------------------------------------------------------

@dataclass
class VariantSummary:
    label: str
    config: dict
    runs: list[RunRecord]

    @property
    def mode(self) -> str:
        return self.config["mode"]

    @property
    def setting(self) -> str:
        if not self.config["delay"]:
            return "ideal"
        return f"delay<={1000 * self.config['channel']['deadline']:.0f}ms"

    def mean(self, family: str, key: str) -> float:
        vals = [_num(r.metrics[family][key]) for r in self.runs if family in r.metrics]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def prediction_family(self) -> str | None:
        fam = "prediction_agg" if self.mode == CooperationMode.PREDICTION.value else "prediction"
        if any(fam in r.metrics for r in self.runs):
            return fam
        return None

    def hull_bin(self, label: str) -> tuple[float, int]:
        fam = self.prediction_family
        if fam is None:
            return float("nan"), 0
        n = sum(r.metrics[fam]["hull_bins"][label]["n"] for r in self.runs if fam in r.metrics)
        s = sum(r.metrics[fam]["hull_bins"][label]["sum"] for r in self.runs if fam in r.metrics)
        return (s / n if n else float("nan")), n


def summarize(records: list[RunRecord]) -> list[VariantSummary]:
    out: dict[str, VariantSummary] = {}
    for r in records:
        if r.label not in out:
            out[r.label] = VariantSummary(r.label, r.config, [])
        out[r.label].runs.append(r)
    return list(out.values())


def baseline_of(variants: list[VariantSummary]) -> VariantSummary | None:
    for v in variants:
        if v.mode == CooperationMode.NO_COOPERATION.value and v.prediction_family:
            return v
    return None


# ----------------------------------------------------------------------------
# text rendering
# ----------------------------------------------------------------------------

def _fmt(v, digits: int = 4) -> str:
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if isinstance(v, (int, np.integer)):
        return str(v)
    return f"{v:.{digits}f}"


def table(headers: list[str], rows: list[list[Any]]) -> str:
    cells = [headers] + [[_fmt(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for n, r in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _pct(x: float) -> str:
    return "-" if math.isnan(x) else f"{100 * x:.1f}%"


def render_summary(records: list[RunRecord], errors: list[str] = ()) -> str:
    variants = summarize(records)
    base = baseline_of(variants)
    parts = []

    parts.append("Detection and communication (means over seeds)")
    parts.append(table(
        ["variant", "cooperation", "setting", "compression", "AP@0.3", "AP@0.5", "AP@0.7", "AR@0.5", "feature MB/s/link", "drops"],
        [[v.label, SHORT_MODE.get(v.mode, v.mode), v.setting, f"{v.config['compression']:g}x",
          v.mean("detection", "ap@0.3"), v.mean("detection", "ap@0.5"), v.mean("detection", "ap@0.7"),
          v.mean("detection", "ar@0.5"), v.mean("bandwidth", "feature_mbps_per_link"),
          v.mean("bandwidth", "feature_drops")] for v in variants],
    ))

    parts.append("Tracking (means over seeds and egos)")
    parts.append(table(
        ["variant", "cooperation", "setting", "compression", "AMOTA", "AMOTP", "sAMOTA", "MOTA", "MOTP", "MT", "ML"],
        [[v.label, SHORT_MODE.get(v.mode, v.mode), v.setting, f"{v.config['compression']:g}x",
          v.mean("tracking", "amota"), v.mean("tracking", "amotp"), v.mean("tracking", "samota"),
          v.mean("tracking", "mota"), v.mean("tracking", "motp"), v.mean("tracking", "mt"),
          v.mean("tracking", "ml")] for v in variants],
    ))

    secs = [f"{h / 10:g}s" for h in HORIZONS]
    base_ade = base.mean(base.prediction_family, f"minade@{HORIZONS[-1]}") if base else float("nan")
    rows = []
    for v in variants:
        fam = v.prediction_family
        if fam is None:
            rows.append([v.label, SHORT_MODE.get(v.mode, v.mode)] + ["-"] * (2 * len(HORIZONS) + 2))
            continue
        ade = v.mean(fam, f"minade@{HORIZONS[-1]}")
        rows.append(
            [v.label, SHORT_MODE.get(v.mode, v.mode)]
            + [v.mean(fam, f"minade@{h}") for h in HORIZONS]
            + [v.mean(fam, f"minfde@{h}") for h in HORIZONS]
            + [v.mean(fam, "missed"), _pct(relative_improvement(base_ade, ade)) if base else "-"]
        )
    parts.append(f"Prediction, minADE_6 / minFDE_6 (means over seeds; improvement vs {base.label if base else 'n/a'} at {secs[-1]})")
    parts.append(table(
        ["variant", "cooperation"] + [f"ADE {s}" for s in secs] + [f"FDE {s}" for s in secs] + ["missed", "improvement"],
        rows,
    ))

    if base:
        others = [v for v in variants if v is not base and v.prediction_family]
        rows = []
        for label in HULL_BIN_LABELS:
            b, bn = base.hull_bin(label)
            row = [f"{label} m^2", b, bn]
            for v in others:
                m, n = v.hull_bin(label)
                row += [m, n, _pct(relative_improvement(b, m)) if bn and n else "-"]
            rows.append(row)
        headers = ["hull area", f"{base.label} ADE {secs[-1]}", "n"]
        for v in others:
            headers += [f"{v.label} ADE {secs[-1]}", "n", "improvement"]
        parts.append(f"Prediction by CAV convex-hull area (records pooled over seeds)")
        parts.append(table(headers, rows))

    prov = []
    for v in variants:
        for r in v.runs:
            prov.append([v.label, r.seed, r.path, r.sha256[:16]])
    parts.append("Provenance: every cell above is computed from these logs")
    parts.append(table(["variant", "seed", "log", "sha256"], prov))
    if errors:
        parts.append("Unreadable logs (excluded)")
        parts.append("\n".join(errors))
    return "\n\n".join(parts) + "\n"


def metrics_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "mode", "delay", "compression", "seed", "metric", "value"])
    for r in records:
        c = r.config
        for name, value in sorted(flatten(r.metrics).items()):
            w.writerow([r.label, c["mode"], c["delay"], f"{c['compression']:g}", r.seed, name, _fmt_csv(value)])
    return buf.getvalue()


def _fmt_csv(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def results_json(records: list[RunRecord]) -> str:
    doc = [
        {"key": r.key, "variant": r.label, "log": r.path, "sha256": r.sha256, "metrics": _clean(r.metrics)}
        for r in records
    ]
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_report(out: str | Path) -> tuple[list[RunRecord], list[str]]:
    """Write ``summary.txt``, ``metrics.csv`` and ``results.json`` into ``out``."""
    out = Path(out)
    records, errors = collect(out)
    if records:
        (out / "summary.txt").write_text(render_summary(records, errors))
        (out / "metrics.csv").write_text(metrics_csv(records))
        (out / "results.json").write_text(results_json(records))
    return records, errors
