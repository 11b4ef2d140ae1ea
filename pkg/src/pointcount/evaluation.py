"""Scoring and reporting: count accuracy over saturated labels, pointing
accuracy under a containment-overlap protocol, and overlay rendering.

The pointing protocol walks the ground-truth boxes of every image whose
total count was predicted correctly and greedily consumes, per box, the
not-yet-used pointer with the highest containment ratio, scoring a hit
when that ratio clears the threshold. Each pointer is consumed at most
once and each box scored at most once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .counthead import CountLabel, saturate_count
from .dataio import SceneAnnotation
from .errors import DataError
from .grids import BBox, Ellipse, Heatmap, bilinear_resize
from .pipelines import PncOutput

ELLIPSE_RASTER = 256
POINTING_BUCKETS = ("1", "2", "3", "4+")


def _label_names(c_max: int) -> list[str]:
    return [str(v) for v in range(c_max)] + [f"{c_max}+"]


@dataclass
class CountReport:
    """Per-label accuracy (counts saturated at c_max), unweighted mean over
    labels with samples, and the full confusion matrix."""

    c_max: int
    per_label: dict[str, float | None]
    mean: float
    confusion: np.ndarray
    support: dict[str, int]

    @property
    def overall(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0


def _predicted_label(pred, c_max: int) -> int:
    if isinstance(pred, PncOutput):
        pred = pred.count
    if isinstance(pred, CountLabel):
        return pred.value
    return min(int(pred), c_max)


def count_accuracy(predictions, ground_truth, c_max: int = 4) -> CountReport:
    """Compare predicted counts against annotations in saturated label space.

    ``predictions``: PncOutput list or {image_id: count}; ``ground_truth``:
    SceneAnnotation list or {image_id: count}. Id sets must match exactly.
    """
    preds = {p.image_id: p for p in predictions} if not isinstance(predictions, dict) else dict(predictions)
    if isinstance(ground_truth, dict):
        gts = dict(ground_truth)
    else:
        gts = {a.image_id: a.count for a in ground_truth}
    if set(preds) != set(gts):
        missing = set(gts) ^ set(preds)
        raise DataError(f"prediction/annotation id mismatch ({len(missing)} ids differ, e.g. {sorted(missing)[:3]})")

    n = c_max + 1
    confusion = np.zeros((n, n), dtype=np.int64)
    for image_id, gt_count in gts.items():
        true_label = saturate_count(int(gt_count), c_max).value
        pred_label = _predicted_label(preds[image_id], c_max)
        confusion[true_label, pred_label] += 1

    names = _label_names(c_max)
    per_label: dict[str, float | None] = {}
    support: dict[str, int] = {}
    accs = []
    for i, name in enumerate(names):
        row_total = int(confusion[i].sum())
        support[name] = row_total
        if row_total == 0:
            per_label[name] = None
        else:
            acc = float(confusion[i, i] / row_total)
            per_label[name] = acc
            accs.append(acc)
    mean = float(np.mean(accs)) if accs else 0.0
    return CountReport(c_max, per_label, mean, confusion, support)


# -- containment ------------------------------------------------------------


def containment_ratio(pointer, box: BBox) -> float:
    """Fraction of the pointer's area inside the box.

    Boxes intersect in closed form; ellipses are rasterized on a 256x256
    grid over their bounding rectangle. A zero-area pointer scores 1 when
    its point lies inside the box, else 0.
    """
    if isinstance(pointer, BBox):
        if pointer.area == 0.0:
            cx, cy = pointer.center
            return 1.0 if box.contains_point(cx, cy) else 0.0
        ix = max(0.0, min(pointer.x_max, box.x_max) - max(pointer.x_min, box.x_min))
        iy = max(0.0, min(pointer.y_max, box.y_max) - max(pointer.y_min, box.y_min))
        return (ix * iy) / pointer.area
    if isinstance(pointer, Ellipse):
        n = ELLIPSE_RASTER
        u = (np.arange(n) + 0.5) / n
        xs = pointer.cx - pointer.sx + u * (2 * pointer.sx)
        ys = pointer.cy - pointer.sy + u * (2 * pointer.sy)
        fx = ((xs - pointer.cx) / pointer.sx) ** 2
        fy = ((ys - pointer.cy) / pointer.sy) ** 2
        inside = fy[:, None] + fx[None, :] <= 1.0
        in_box = (
            (xs[None, :] >= box.x_min) & (xs[None, :] <= box.x_max)
            & (ys[:, None] >= box.y_min) & (ys[:, None] <= box.y_max)
        )
        denom = int(inside.sum())
        if denom == 0:
            return 1.0 if box.contains_point(pointer.cx, pointer.cy) else 0.0
        return float((inside & in_box).sum() / denom)
    raise DataError(f"unsupported pointer type {type(pointer).__name__}")


def greedy_match(pointers, boxes, threshold: float):
    """For each box in order, consume the best-containment unused pointer
    whose ratio exceeds the threshold. Returns (box index, pointer index)
    pairs; both sides are matched at most once."""
    available = list(range(len(pointers)))
    matches = []
    for bi, box in enumerate(boxes):
        if not available:
            break
        ratios = [containment_ratio(pointers[pi], box) for pi in available]
        best_pos = int(np.argmax(ratios))
        if ratios[best_pos] > threshold:
            matches.append((bi, available.pop(best_pos)))
    return matches


@dataclass
class PointingReport:
    """Hit rates per ground-truth count bucket at each overlap threshold."""

    per_threshold: dict[float, dict[str, float | None]]
    support: dict[str, int] = field(default_factory=dict)
    images_scored: int = 0
    images_total: int = 0


def _bucket(count: int) -> str:
    return f"{count}" if count < 4 else "4+"


def pointing_accuracy(outputs, annotations, ratios=(0.5, 0.8)) -> PointingReport:
    """Score pointers on images whose total count was predicted correctly."""
    if np.isscalar(ratios):
        ratios = (float(ratios),)
    ann_by_id = {a.image_id: a for a in annotations}
    outs = list(outputs)
    for out in outs:
        if out.image_id not in ann_by_id:
            raise DataError(f"no annotation for result {out.image_id!r}")

    scored = [o for o in outs if o.count_matches(ann_by_id[o.image_id].count)]
    support: dict[str, int] = {b: 0 for b in POINTING_BUCKETS}
    for out in scored:
        ann = ann_by_id[out.image_id]
        if ann.count > 0:
            support[_bucket(ann.count)] += ann.count

    per_threshold = {}
    for t in ratios:
        hits = {b: 0 for b in POINTING_BUCKETS}
        for out in scored:
            ann = ann_by_id[out.image_id]
            if ann.count == 0:
                continue
            matched = greedy_match(out.pointers, ann.boxes, t)
            hits[_bucket(ann.count)] += len(matched)
        per_threshold[float(t)] = {
            b: (hits[b] / support[b] if support[b] else None) for b in POINTING_BUCKETS
        }
    return PointingReport(per_threshold, support, len(scored), len(outs))


# -- report formatting -------------------------------------------------------


def _cell(value, percent=False):
    if value is None:
        return "-"
    if percent:
        return str(int(round(value)))
    return f"{value:.2f}".lstrip("0")


def format_count_table(rows) -> str:
    """Rows of (method, five per-label percentages, mean percentage) laid
    out with columns Methods | 0 1 2 3 4+ | mean(%)."""
    header = ["Methods", "0", "1", "2", "3", "4+", "mean(%)"]
    table = [header]
    for method, per_label, mean in rows:
        table.append([method] + [_cell(v, percent=True) for v in per_label] + [_cell(mean, percent=True)])
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table)


def format_pointing_table(rows) -> str:
    """Rows of (overlap, method, three accuracies) with columns
    Overlap | Methods | 1 2 3."""
    header = ["Overlap", "Methods", "1", "2", "3"]
    table = [header]
    for overlap, method, accs in rows:
        table.append([f"{overlap:g}", method] + [_cell(v) for v in accs])
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table)


def count_report_rows(method: str, report: CountReport):
    names = _label_names(report.c_max)
    per = [None if report.per_label[n] is None else 100.0 * report.per_label[n] for n in names]
    return (method, per, 100.0 * report.mean)


def pointing_report_rows(method: str, report: PointingReport):
    rows = []
    for t in sorted(report.per_threshold):
        accs = [report.per_threshold[t][b] for b in ("1", "2", "3")]
        rows.append((t, method, accs))
    return rows


def report_csv(count_rows, pointing_rows, pointing_supplement=None, meta: dict | None = None) -> str:
    """Two CSV blocks mirroring the standard table layouts, plus an optional
    supplementary 4+ pointing block."""
    lines = []
    if meta:
        for key in sorted(meta):
            lines.append(f"# {key}={meta[key]}")
    lines.append("Methods,0,1,2,3,4+,mean(%)")
    for method, per_label, mean in count_rows:
        lines.append(",".join([method] + [_cell(v, percent=True) for v in per_label] + [_cell(mean, percent=True)]))
    lines.append("")
    lines.append("Overlap,Methods,1,2,3")
    for overlap, method, accs in pointing_rows:
        lines.append(",".join([f"{overlap:g}", method] + [_cell(v) for v in accs]))
    if pointing_supplement:
        lines.append("")
        lines.append("# supplementary: 4+ bucket")
        lines.append("Overlap,Methods,4+")
        for overlap, method, acc in pointing_supplement:
            lines.append(",".join([f"{overlap:g}", method, _cell(acc)]))
    return "\n".join(lines) + "\n"


# -- rendering ---------------------------------------------------------------


def _to_rgb(gray: np.ndarray) -> np.ndarray:
    g = np.clip(np.asarray(gray, dtype=np.float32), 0.0, 1.0)
    return np.stack([g, g, g], axis=-1)


def _heat_rgb(hm: Heatmap, width: int, height: int) -> np.ndarray:
    grid = hm.grid
    if grid.shape != (height, width):
        grid = bilinear_resize(grid, width, height)
    peak = float(grid.max())
    v = grid / peak if peak > 0 else grid
    r = np.clip(3.0 * v, 0, 1)
    g = np.clip(3.0 * v - 1.0, 0, 1)
    b = np.clip(3.0 * v - 2.0, 0, 1)
    return np.stack([r, g, b], axis=-1)


def _draw_pixel(rgb: np.ndarray, x: int, y: int, color):
    h, w = rgb.shape[:2]
    if 0 <= x < w and 0 <= y < h:
        rgb[y, x] = color


def _draw_box(rgb: np.ndarray, box: BBox, color):
    x0, y0 = int(round(box.x_min)), int(round(box.y_min))
    x1, y1 = int(round(box.x_max)) - 1, int(round(box.y_max)) - 1
    for x in range(x0, x1 + 1):
        _draw_pixel(rgb, x, y0, color)
        _draw_pixel(rgb, x, y1, color)
    for y in range(y0, y1 + 1):
        _draw_pixel(rgb, x0, y, color)
        _draw_pixel(rgb, x1, y, color)


def _draw_ellipse(rgb: np.ndarray, ell: Ellipse, color):
    n = max(64, int(4 * (ell.sx + ell.sy)))
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    xs = np.round(ell.cx + ell.sx * np.cos(t)).astype(int)
    ys = np.round(ell.cy + ell.sy * np.sin(t)).astype(int)
    for x, y in zip(xs, ys):
        _draw_pixel(rgb, int(x), int(y), color)


def render_overlay(image, heatmap: Heatmap, pointers, path) -> None:
    """Write a three-panel PNG: input, colored heat, input with pointers.

    Output bytes are a pure function of the inputs (no timestamps).
    """
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / np.float32(255.0)
    h, w = img.shape
    left = _to_rgb(img)
    mid = _heat_rgb(heatmap, w, h)
    right = _to_rgb(img)
    red = np.array([1.0, 0.2, 0.2], dtype=np.float32)
    for pointer in pointers:
        if isinstance(pointer, BBox):
            _draw_box(right, pointer, red)
        elif isinstance(pointer, Ellipse):
            _draw_ellipse(right, pointer, red)
        else:
            raise DataError(f"unsupported pointer type {type(pointer).__name__}")
    sep = np.ones((h, 2, 3), dtype=np.float32)
    panel = np.concatenate([left, sep, mid, sep, right], axis=1)
    out = np.round(np.clip(panel, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(out, mode="RGB").save(path, format="PNG")
