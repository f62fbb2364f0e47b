"""Report files: JSON, CSV, fixed-width text, and PNG figures side by side.

Every report path writes its figures next to the delimited output so a
run directory is self-describing without extra tooling.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError
from .evaluation import METRIC_KEYS, AblationTable

log = logging.getLogger(__name__)

_FLOAT_FMT = "{:.2f}"


def write_json(path: Path, payload: dict) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _fmt(value) -> str:
    if isinstance(value, float):
        return _FLOAT_FMT.format(value)
    return str(value)


def fixed_width_table(rows: list[dict], columns: list[str]) -> str:
    """Right-aligned numeric columns, left-aligned text, two-space gutters."""
    cells = [[_fmt(row.get(col, "")) for col in columns] for row in rows]
    widths = [
        max(len(col), *(len(r[i]) for r in cells)) if cells else len(col)
        for i, col in enumerate(columns)
    ]
    numeric = [
        all(isinstance(row.get(col), (int, float)) for row in rows) if rows else False
        for col in columns
    ]

    def line(parts: list[str]) -> str:
        out = []
        for i, part in enumerate(parts):
            out.append(part.rjust(widths[i]) if numeric[i] else part.ljust(widths[i]))
        return "  ".join(out).rstrip()

    header = line(list(columns))
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([header, rule] + [line(r) for r in cells]) + "\n"


# ---------------------------------------------------------------------------
# retrieval


_RETRIEVAL_COLS = ["direction", "r@1", "r@5", "r@10", "r@50", "med_r", "mean_r", "n"]


def _retrieval_rows(result: dict) -> list[dict]:
    rows = []
    for direction in ("t2v", "v2t"):
        rep = result[direction]
        rows.append({
            "direction": direction,
            "r@1": rep["r_at"]["1"],
            "r@5": rep["r_at"]["5"],
            "r@10": rep["r_at"]["10"],
            "r@50": rep["r_at"]["50"],
            "med_r": rep["med_r"],
            "mean_r": rep["mean_r"],
            "n": rep["n_queries"],
        })
    return rows


def write_retrieval_report(out_dir: Path, result: dict, stem: str = "eval") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_json(out_dir / f"{stem}.json", result)]
    rows = _retrieval_rows(result)
    text = fixed_width_table(rows, _RETRIEVAL_COLS)
    if "zeroshot" in result:
        z = result["zeroshot"]
        text += (
            f"\nzero-shot classification: {z['accuracy']:.2f}% over "
            f"{z['n_classes']} classes (chance {z['chance']:.2f}%)\n"
        )
    table_path = out_dir / f"{stem}.txt"
    table_path.write_text(text)
    paths.append(table_path)
    paths.append(_recall_figure(out_dir / f"{stem}_recall.png", result))
    if "zeroshot" in result:
        paths.append(_confusion_figure(out_dir / f"{stem}_confusion.png", result["zeroshot"]))
    return paths


def _recall_figure(path: Path, result: dict) -> Path:
    ks = sorted(int(k) for k in result["t2v"]["r_at"])
    x = np.arange(len(ks))
    width = 0.38
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for off, direction in ((-width / 2, "t2v"), (width / 2, "v2t")):
        vals = [result[direction]["r_at"][str(k)] for k in ks]
        ax.bar(x + off, vals, width, label=direction)
    ax.set_xticks(x, [f"R@{k}" for k in ks])
    ax.set_ylabel("recall (%)")
    ax.set_ylim(0, 105)
    ax.legend()
    ax.set_title("retrieval recall")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_zeroshot_report(out_dir: Path, result: dict, stem: str = "eval") -> list[Path]:
    """Classification-only report: JSON plus the confusion-matrix figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        write_json(out_dir / f"{stem}.json", result),
        _confusion_figure(out_dir / f"{stem}_confusion.png", result["zeroshot"]),
    ]


def _confusion_figure(path: Path, zeroshot: dict) -> Path:
    conf = np.asarray(zeroshot["confusion"], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    im = ax.imshow(conf, cmap="Blues")
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_title(f"zero-shot confusion (acc {zeroshot['accuracy']:.1f}%)")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# training curves


def write_loss_curves(out_dir: Path, log_path: Path, stem: str = "training") -> Path:
    """Render l_vanilla / l_mvm / l_total against step from a JSONL log."""
    log_path = Path(log_path)
    if not log_path.exists():
        raise DataError(f"loss log {log_path} missing")
    records = []
    with open(log_path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{log_path}:{lineno}: bad JSON record: {exc}") from exc
    if not records:
        raise DataError(f"loss log {log_path} is empty")
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for key in ("l_total", "l_vanilla", "l_mvm"):
        ax.plot(steps, [r[key] for r in records], label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("training losses")
    fig.tight_layout()
    out = Path(out_dir) / f"{stem}_losses.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


# ---------------------------------------------------------------------------
# ablations


def _ablation_columns() -> list[str]:
    cols = ["variant", "seeds_ok", "seeds_total"]
    for key in METRIC_KEYS:
        cols.extend([f"{key}_mean", f"{key}_range"])
    return cols


def write_ablation_table(out_dir: Path, table: AblationTable) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"ablation_{table.axis}"
    columns = _ablation_columns()
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in table.rows:
            writer.writerow({c: row.get(c, "") for c in columns})
    txt_path = out_dir / f"{stem}.txt"
    txt_path.write_text(fixed_width_table(table.rows, columns))
    json_path = write_json(out_dir / f"{stem}.json", table.as_dict())
    fig_path = _ablation_figure(out_dir / f"{stem}_t2v_r1.png", table)
    return [csv_path, txt_path, json_path, fig_path]


def _ablation_figure(path: Path, table: AblationTable) -> Path:
    names = [row["variant"] for row in table.rows]
    means = np.asarray([row["t2v_r1_mean"] for row in table.rows], dtype=np.float64)
    ranges = np.asarray([row["t2v_r1_range"] for row in table.rows], dtype=np.float64)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(5.0, 0.8 * len(names) + 2.0), 3.8))
    ax.bar(x, np.nan_to_num(means), yerr=np.nan_to_num(ranges) / 2.0, capsize=3)
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylabel("t2v R@1 (%)")
    ax.set_title(f"ablation: {table.axis} (mean over seeds, bars = half range)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
