"""Static figures and tables rendered from stored experiment outputs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "aetransfer"
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import AasrMatrix  # noqa: E402

FORMATS = ("svg", "pdf")


class ReportError(RuntimeError):
    pass


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    meta = {"Date": None} if path.suffix == ".svg" else {"CreationDate": None}
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def _is_trend(matrix: AasrMatrix) -> bool:
    """One test group and rows named '<prefix>-<int>': draw a line instead of bars."""
    if len(matrix.cols) != 1:
        return False
    return all(r.rsplit("-", 1)[-1].isdigit() for r in matrix.rows)


def plot_matrix(matrix: AasrMatrix, path, title: str = "") -> Path:
    path = Path(path)
    vals = matrix.values()
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(matrix.rows) + 2), 3.6))
    if _is_trend(matrix):
        xs = [int(r.rsplit("-", 1)[-1]) for r in matrix.rows]
        ax.plot(xs, vals[:, 0], marker="o", color="tab:blue")
        ax.set_xticks(xs)
        ax.set_xlabel(matrix.rows[0].rsplit("-", 1)[0])
        ax.set_title(title or f"AASR on {matrix.cols[0]}")
    else:
        x = np.arange(len(matrix.rows))
        width = 0.8 / len(matrix.cols)
        for j, col in enumerate(matrix.cols):
            ax.bar(x + (j - (len(matrix.cols) - 1) / 2) * width, np.nan_to_num(vals[:, j]), width, label=col)
        ax.set_xticks(x)
        ax.set_xticklabels(matrix.rows, rotation=20, ha="right")
        ax.set_xlabel("target group")
        ax.legend(title="test group", fontsize=8)
        ax.set_title(title)
    ax.set_ylabel("AASR")
    ax.set_ylim(0, 1.05)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def read_noise_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_noise(rows: list[dict], path, title: str = "") -> Path:
    """Bar (or line, for size-indexed groups) chart of per-group noise magnitude."""
    path = Path(path)
    groups = [r for r in rows if r["scope"] == "group"]
    if not groups:
        raise ReportError("noise table has no group rows")
    names = [r["name"] for r in groups]
    vals = [float(r["magnitude"]) for r in groups]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(names) + 2), 3.4))
    if all(n.rsplit("-", 1)[-1].isdigit() for n in names):
        xs = [int(n.rsplit("-", 1)[-1]) for n in names]
        ax.plot(xs, vals, marker="s", color="tab:red")
        ax.set_xticks(xs)
        ax.set_xlabel(names[0].rsplit("-", 1)[0])
    else:
        ax.bar(range(len(names)), vals, color="tab:red")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("noise magnitude M")
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def render_run(run_dir, out_dir=None, fmt: str = "svg") -> dict[str, Path]:
    """Figures plus a summary table for one stored experiment directory."""
    if fmt not in FORMATS:
        raise ReportError(f"unsupported figure format {fmt!r}; choose from {FORMATS}")
    run_dir = Path(run_dir)
    src = run_dir / "aasr_matrix.json"
    if not src.exists():
        raise ReportError(f"{src} not found")
    out = Path(out_dir) if out_dir is not None else run_dir / "figures"
    matrix = AasrMatrix.from_dict(json.loads(src.read_text()))
    name = run_dir.name
    cfg = run_dir / "experiment.json"
    if cfg.exists():
        name = json.loads(cfg.read_text()).get("name", name)
    paths = {"aasr": plot_matrix(matrix, out / f"{name}-aasr.{fmt}", title=name)}
    noise = run_dir / "noise.csv"
    if noise.exists():
        paths["noise"] = plot_noise(read_noise_csv(noise), out / f"{name}-noise.{fmt}", title=name)
    summary = out / f"{name}-summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_group"] + matrix.cols)
        for r, row in zip(matrix.rows, matrix.values()):
            w.writerow([r] + [f"{v:.6f}" for v in row])
    paths["summary"] = summary
    return paths
