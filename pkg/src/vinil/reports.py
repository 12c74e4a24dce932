"""Report files: metrics table, task x session heatmaps and neighbor dumps."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

METHOD_NAMES = {"finetune": "FT", "ewc": "EwC", "replay": "Replay"}
SUPERVISION_NAMES = {"label": "Label", "self": "VINIL"}


def row_label(method: str, supervision: str) -> str:
    return f"{METHOD_NAMES[method]} ({SUPERVISION_NAMES[supervision]})"


def _ensure_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    if not out.is_dir():
        raise OSError(f"report path {out} is not a directory")
    return out


def write_metrics(path, incremental: list[dict], cross_rows: list[dict], notes: dict | None = None) -> Path:
    payload = {"incremental": incremental, "cross_dataset": cross_rows}
    if notes:
        payload["notes"] = notes
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_heatmap_csv(path, matrix: np.ndarray) -> Path:
    """Rows are tasks, columns sessions; values written with ``repr``."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task"] + [f"s{s}" for s in range(matrix.shape[1])])
        for t, row in enumerate(matrix):
            w.writerow([t] + [repr(float(v)) for v in row])
    return path


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)


def _color(v: float) -> str:
    if not np.isfinite(v):
        return "#dddddd"
    v = min(1.0, max(0.0, v))
    r = int(round(255 * (1 - v) + 30 * v))
    g = int(round(255 * (1 - v) + 110 * v))
    b = int(round(255 * (1 - v) + 200 * v))
    return f"#{r:02x}{g:02x}{b:02x}"


def write_heatmap_svg(path, matrix: np.ndarray, title: str = "") -> Path:
    cell, pad = 48, 40
    n_t, n_s = matrix.shape
    width, height = pad + cell * n_s + 10, pad + cell * n_t + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<text x="{pad}" y="14">{title}</text>']
    for s in range(n_s):
        out.append(f'<text x="{pad + s * cell + cell / 2}" y="{pad - 6}" '
                   f'text-anchor="middle">s{s}</text>')
    for t in range(n_t):
        y = pad + t * cell
        out.append(f'<text x="{pad - 6}" y="{y + cell / 2 + 4}" text-anchor="end">t{t}</text>')
        for s in range(n_s):
            v = float(matrix[t, s])
            x = pad + s * cell
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                       f'fill="{_color(v)}" stroke="#ffffff"/>')
            if np.isfinite(v):
                fill = "#ffffff" if v > 0.6 else "#000000"
                out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" '
                           f'fill="{fill}">{100 * v:.1f}</text>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


def write_neighbors(path, dumps: list[dict]) -> Path:
    """Tab-separated: a ``query`` line followed by one line per neighbor, nearest first."""
    lines = ["# query\trow\tinstance\tview", "# rank\trow\tinstance\tview\tdistance\thit"]
    for q in dumps:
        lines.append(f"query\t{q['row']}\t{q['instance']}\t{q['view']}")
        for rank, nb in enumerate(q["neighbors"], start=1):
            hit = "hit" if nb["instance"] == q["instance"] else "miss"
            lines.append(f"{rank}\t{nb['row']}\t{nb['instance']}\t{nb['view']}\t"
                         f"{nb['distance']!r}\t{hit}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_neighbors(path) -> list[dict]:
    dumps: list[dict] = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        f = line.split("\t")
        if f[0] == "query":
            dumps.append({"row": int(f[1]), "instance": int(f[2]), "view": int(f[3]), "neighbors": []})
        else:
            dumps[-1]["neighbors"].append({"row": int(f[1]), "instance": int(f[2]),
                                           "view": int(f[3]), "distance": float(f[4])})
    return dumps


def format_table(incremental: list[dict], cross_rows: list[dict] | None = None) -> str:
    """Plain-text table in percent, Acc up / For down, plus cross-dataset rows."""
    lines = [f"{'Method':<16}{'Acc (up)':>10}{'For (down)':>12}"]
    for r in incremental:
        lines.append(f"{r['row']:<16}{100 * r['Acc']:>10.3f}{100 * r['For']:>12.3f}")
    if cross_rows:
        lines.append("")
        lines.append(f"{'Method':<16}{'Train':>8}{'Test':>8}{'Acc':>10}{'%drop':>8}")
        for r in cross_rows:
            lines.append(f"{r['row']:<16}{r['train_on']:>8}{r['test_on']:>8}"
                         f"{100 * r['Acc']:>10.3f}{r['drop_pct']:>8.1f}")
    return "\n".join(lines) + "\n"


def emit_reports(record, out_dir=None, svg: bool = True) -> dict[str, Path]:
    """Write metrics.json, heatmap_<tag>.csv, neighbors.txt and heatmap.svg."""
    out = _ensure_dir(out_dir if out_dir is not None else record.output_dir)
    method, supervision = record.config["strategy"]["method"], record.config["strategy"]["supervision"]
    tag = f"{method}-{supervision}"
    matrix = np.asarray(record.matrix, dtype=np.float64)
    row = row_label(method, supervision)
    incremental = [{"row": row, "method": METHOD_NAMES[method], "supervision": SUPERVISION_NAMES[supervision],
               "Acc": record.metrics["Acc"], "For": record.metrics["For"]}]
    cross_rows = []
    if record.metrics.get("cross") is not None:
        c = record.metrics["cross"]
        cross_rows.append({"row": row, "method": METHOD_NAMES[method],
                       "supervision": SUPERVISION_NAMES[supervision],
                       "train_on": c["train_on"], "test_on": c["test_on"],
                       "Acc": c["Acc"], "drop_pct": c["drop_pct"]})
    notes = {"acc": "per-session mean over tasks seen so far, averaged over sessions",
             "for": "mean over tasks measured at least twice of best minus final accuracy",
             "k_nn": record.config["protocol"]["k_nn"], "seed": record.config["seed"],
             "dataset": record.config["dataset"]}
    paths = {
        "metrics": write_metrics(out / "metrics.json", incremental, cross_rows, notes),
        "heatmap": write_heatmap_csv(out / f"heatmap_{tag}.csv", matrix),
        "neighbors": write_neighbors(out / "neighbors.txt", record.neighbors),
    }
    if svg:
        paths["svg"] = write_heatmap_svg(out / "heatmap.svg", matrix, row)
    return paths
