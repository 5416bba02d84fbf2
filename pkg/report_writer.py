"""Delimiter-separated and plain-text report emission with a manifest of everything written."""

import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import CSV_SEPARATOR, FLOAT_FORMAT
from probit_model import ProbitFit, standard_errors

logger = logging.getLogger(__name__)

# figure key -> (plot-data file, what it shows)
PLOT_INVENTORY: Tuple[Tuple[str, str, str], ...] = (
    ("fig01", "mev_share_daily.csv", "daily share of blocks built by MEV builders"),
    ("fig02", "revenue_daily.csv", "daily validator net gas revenue and MEV payments"),
    ("fig03", "ame_daily.csv", "daily average marginal effects on first-quartile placement"),
    ("fig04", "ame_quantiles_daily.csv", "daily 10th/50th/90th percentiles of per-transaction effects"),
    ("fig05", "insurance_daily.csv", "daily reordering-insurance gas and USD"),
    ("fig06", "sandwich_daily.csv", "daily sandwich attack counts"),
    ("fig07", "sandwich_daily.csv", "daily sandwich attack profits"),
    ("fig08", "ame_daily.csv", "daily front-run and back-run average effects (extended model rows)"),
    ("fig09", "ame_quantiles_daily.csv", "daily front-run and back-run effect percentiles (extended model rows)"),
    ("fig10", "filtered_effects_hist.csv", "histogram of front/back-run effects above the threshold"),
    ("fig11", "eq4_daily.csv", "daily sandwich-cost coefficient with confidence bounds"),
    ("fig12", "eq4_daily.csv", "daily block-sandwich-count coefficient with confidence bounds"),
    ("fig13", "skewness_daily.csv", "daily skewness of raw effects and residuals with bootstrap bounds"),
)

SIGN_NOTE = "effects are changes in P(first quartile); positive means pulled to the front of the block"


@dataclass
class OutputEntry:
    rows: int
    complete: bool = True
    note: str = ""


@dataclass
class ReportWriter:
    out_dir: Path
    outputs: Dict[str, OutputEntry] = field(default_factory=dict)

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def _record(self, name: str, rows: int) -> None:
        """A rewrite keeps an earlier incomplete mark for the same file"""
        previous = self.outputs.get(name)
        entry = OutputEntry(rows=rows)
        if previous is not None and not previous.complete:
            entry.complete, entry.note = False, previous.note
        self.outputs[name] = entry

    def write_frame(self, name: str, frame: pd.DataFrame, index: bool = False, note: str = "") -> Path:
        """`note` becomes a leading '# ' line; read back with pd.read_csv(path, comment='#')"""
        path = self.path(name)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            if note:
                f.write(f"# {note}\n")
            frame.to_csv(f, index=index, sep=CSV_SEPARATOR, float_format=FLOAT_FORMAT, lineterminator="\n")
        self._record(name, len(frame))
        logger.debug("Wrote %s (%d rows)", path, len(frame))
        return path

    def write_text(self, name: str, lines: Sequence[str]) -> Path:
        path = self.path(name)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        self._record(name, len(lines))
        return path

    def mark_incomplete(self, name: str, note: str) -> None:
        entry = self.outputs.setdefault(name, OutputEntry(rows=0))
        entry.complete = False
        entry.note = "; ".join(filter(None, (entry.note, note)))

    def write_manifest(self, config_hash: str, errors: Iterable[str] = (), notes: Iterable[str] = ()) -> Path:
        errors = list(errors)
        complete = not errors and all(e.complete for e in self.outputs.values())
        lines = [
            f"config_hash: {config_hash}",
            f"status: {'complete' if complete else 'incomplete'}",
            f"note: {SIGN_NOTE}",
        ]
        lines.extend(f"note: {n}" for n in notes)
        lines.append("")
        lines.append("outputs:")
        for name in sorted(self.outputs):
            entry = self.outputs[name]
            flag = "" if entry.complete else f"  INCOMPLETE ({entry.note})"
            lines.append(f"  {name}  rows={entry.rows}{flag}")
        lines.append("")
        lines.append("plots:")
        for key, name, description in PLOT_INVENTORY:
            state = "written" if name in self.outputs else "not produced"
            lines.append(f"  {key} {name} [{state}] {description}")
        if errors:
            lines.append("")
            lines.append("errors:")
            lines.extend(f"  {e}" for e in errors)
        path = self.path("manifest.txt")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        return path


def _fmt(value: float) -> str:
    return FLOAT_FORMAT % value if np.isfinite(value) else "nan"


def fit_report_lines(fit: ProbitFit, day: Optional[date] = None) -> List[str]:
    """Human-readable ordered probit summary: header, coefficient table, diagnostics"""
    table = standard_errors(fit)
    lines = [
        f"ordered probit fit{' for ' + day.isoformat() if day else ''}",
        f"observations: {fit.n_obs}",
        f"buckets: {fit.buckets}",
        f"converged: {str(fit.converged).lower()}",
        f"iterations: {fit.iterations}",
        f"log_likelihood: {_fmt(fit.log_likelihood)}",
        f"gradient_norm: {_fmt(fit.gradient_norm)}",
        f"clamped_rows: {fit.clamped_rows}",
        f"dropped_columns: {','.join(fit.dropped_columns) or '-'}",
        f"separated: {','.join(fit.separated) or '-'}",
        "",
        f"{'variable':<20} {'coef':>16} {'se':>16} {'z':>16} {'p':>16}",
    ]
    for name, row in table.iterrows():
        lines.append(
            f"{name:<20} {_fmt(row['coef']):>16} {_fmt(row['se']):>16} {_fmt(row['z']):>16} {_fmt(row['p']):>16} {row['stars']}"
        )
    lines.append("")
    lines.append("significance: *** p<0.001, ** p<0.01, * p<0.1")
    return lines


def day_stamp(day: date) -> str:
    return day.strftime("%Y%m%d")
