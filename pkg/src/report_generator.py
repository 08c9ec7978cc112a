"""Report generator for evaluation results and training curves."""

import io
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from jinja2 import Environment, FileSystemLoader, select_autoescape  # noqa: E402

from evaluation import EvalReport, ReportError, RocResult, counts_table  # noqa: E402

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_MARKER = f"# cxr-report v{SCHEMA_VERSION}"
FORMATS = ("text", "csv", "json", "html")
CSV_COLUMNS = [
    "class",
    "precision",
    "recall",
    "f1",
    "auc",
    "specificity",
    "npv",
    "accuracy",
    "tp",
    "fp",
    "fn",
    "tn",
]
TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"


def _fmt(value: Optional[float], digits: int = 6) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


class ReportGenerator:
    """Renders an ``EvalReport`` as text, CSV, JSON or HTML."""

    def __init__(self, template_dir: Optional[Path] = None):
        """Initialize report generator.

        Args:
            template_dir: Directory holding report templates
        """
        env = Environment(
            loader=FileSystemLoader(str(template_dir or TEMPLATE_DIR)),
            autoescape=select_autoescape(["html", "html.j2"]),
            keep_trailing_newline=True,
            trim_blocks=True,
            lstrip_blocks=True,
        )
        env.filters["metric"] = _fmt
        self.env = env

    def _context(self, report: EvalReport) -> Dict[str, Any]:
        rows = []
        for row in report.rows:
            rows.append(
                {
                    "name": row.name,
                    "precision": row.precision,
                    "recall": row.recall,
                    "f1": row.f1,
                    "auc": row.auc,
                    "specificity": row.specificity,
                    "npv": row.npv,
                    "accuracy": row.accuracy,
                    "counts": row.counts,
                    "degenerate": row.degenerate,
                }
            )
        matrix = None
        if report.kind == "triage" and len(report.rows) == 2:
            matrix = {
                "labels": report.class_names,
                "cells": counts_table(report.rows[1].counts),
            }
        return {
            "title": "Triage report" if report.kind == "triage" else "Pathology report",
            "report": report,
            "rows": rows,
            "macro": report.macro,
            "matrix": matrix,
            "generated": datetime.now().strftime("%Y-%m-%d %H:%M"),
        }

    def render(self, report: EvalReport, fmt: str = "text") -> bytes:
        if not report.rows:
            raise ReportError("report has no classes")
        if fmt == "text":
            return self.env.get_template("report.txt.j2").render(**self._context(report)).encode("utf-8")
        if fmt == "html":
            return self.env.get_template("report.html.j2").render(**self._context(report)).encode("utf-8")
        if fmt == "json":
            payload = {"schema_version": SCHEMA_VERSION, **report.to_dict()}
            return (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8")
        if fmt == "csv":
            return self._csv(report)
        raise ReportError(f"Unknown report format: {fmt}")

    def _csv(self, report: EvalReport) -> bytes:
        records = []
        for row in report.rows:
            records.append(
                {
                    "class": row.name,
                    "precision": row.precision,
                    "recall": row.recall,
                    "f1": row.f1,
                    "auc": row.auc,
                    "specificity": row.specificity,
                    "npv": row.npv,
                    "accuracy": row.accuracy,
                    "tp": row.counts.tp,
                    "fp": row.counts.fp,
                    "fn": row.counts.fn,
                    "tn": row.counts.tn,
                }
            )
        records.append({"class": "Average", **report.macro})
        buffer = io.StringIO()
        buffer.write(CSV_MARKER + "\n")
        pd.DataFrame(records, columns=CSV_COLUMNS).to_csv(buffer, index=False, lineterminator="\n")
        return buffer.getvalue().encode("utf-8")

    def write_all(
        self, report: EvalReport, out_dir: Union[str, Path], formats: Sequence[str] = ("text", "csv", "json")
    ) -> List[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        suffix = {"text": "txt", "csv": "csv", "json": "json", "html": "html"}
        paths = []
        for fmt in formats:
            path = out / f"report.{suffix[fmt]}"
            path.write_bytes(self.render(report, fmt))
            paths.append(path)
        logger.info(f"Wrote {len(paths)} report file(s) to {out}")
        return paths


def render_report(report: EvalReport, fmt: str = "text") -> bytes:
    return ReportGenerator().render(report, fmt)


def read_report_csv(data: Union[str, bytes]) -> pd.DataFrame:
    """Parse a rendered report CSV back into a frame."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    lines = text.splitlines()
    if not lines or lines[0] != CSV_MARKER:
        raise ReportError("not a report CSV (missing version marker)")
    return pd.read_csv(io.StringIO("\n".join(lines[1:])))


def plot_roc_curves(rocs: Dict[str, RocResult], path: Union[str, Path]) -> Path:
    """One ROC curve per class with its AUC in the legend."""
    if not rocs:
        raise ReportError("no ROC curves to plot")
    fig, ax = plt.subplots(figsize=(6, 6))
    for name, roc in rocs.items():
        ax.plot(roc.fpr, roc.tpr, label=f"{name} (AUC {roc.auc:.3f})")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.legend(loc="lower right", fontsize="small")
    ax.set_title("ROC")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_history(history: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Loss and validation macro-AUC per epoch; phase changes marked."""
    if history.empty:
        raise ReportError("history is empty")
    fig, (loss_ax, auc_ax) = plt.subplots(1, 2, figsize=(10, 4))
    loss_ax.plot(history["epoch"], history["train_loss"], label="train")
    loss_ax.plot(history["epoch"], history["val_loss"], label="validation")
    loss_ax.set_xlabel("epoch")
    loss_ax.set_ylabel("loss")
    loss_ax.legend()
    auc_ax.plot(history["epoch"], history["val_auc_macro"], color="tab:green")
    auc_ax.set_xlabel("epoch")
    auc_ax.set_ylabel("validation macro AUC")

    phases = history["phase"].tolist()
    for i in range(1, len(phases)):
        if phases[i] != phases[i - 1]:
            boundary = history["epoch"].iloc[i] - 0.5
            for ax in (loss_ax, auc_ax):
                ax.axvline(boundary, linestyle=":", color="grey")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
