"""Stacked-digit dataset synthesis.

A class is a construction rule: K digit parts placed at anchored offsets
in one of four layout families. Objects are composed from randomly drawn
digit exemplars, so N exemplars per digit yield N^K distinct digit
combinations per class. Scenes place multiple instances of one class on
a larger canvas under a difficulty preset, with exact box annotations.

Digit exemplars come either from real MNIST IDX files (``mnist_digit_store``)
or from the built-in procedural glyph renderer (``glyph_digit_store``),
which draws jittered stroke skeletons and needs no external data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import uniform_filter

from .dataio import SceneAnnotation, load_idx, pack_json, save_annotations, write_container
from .errors import DataError
from .grids import BBox, bilinear_resize

DIGIT_SIZE = 28
INK_THRESHOLD = 0.08
LAYOUTS = ("vertical", "horizontal", "diagonal", "l_shape")

_I64_MAX = 2**63 - 1


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, index...) — parallel-safe addressing."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in key]))


# -- digit sources ---------------------------------------------------------

# Stroke skeletons per digit on the unit square (x right, y down). Each
# stroke is a polyline; curved strokes are sampled from ellipse arcs.


def _arc(cx, cy, rx, ry, t0, t1, n=14):
    t = np.linspace(t0, t1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _digit_strokes() -> dict[int, list[np.ndarray]]:
    pi = math.pi
    return {
        0: [_arc(0.5, 0.5, 0.30, 0.40, 0, 2 * pi, 22)],
        1: [
            np.array([[0.34, 0.28], [0.55, 0.10]]),
            np.array([[0.55, 0.10], [0.55, 0.90]]),
        ],
        2: [
            _arc(0.5, 0.32, 0.27, 0.24, -pi, 0.15 * pi, 12),
            np.array([[0.74, 0.43], [0.24, 0.88]]),
            np.array([[0.24, 0.88], [0.78, 0.88]]),
        ],
        3: [
            _arc(0.45, 0.30, 0.25, 0.21, -0.75 * pi, 0.5 * pi, 12),
            _arc(0.45, 0.68, 0.27, 0.23, -0.5 * pi, 0.75 * pi, 12),
        ],
        4: [
            np.array([[0.62, 0.10], [0.22, 0.60]]),
            np.array([[0.22, 0.60], [0.82, 0.60]]),
            np.array([[0.62, 0.32], [0.62, 0.90]]),
        ],
        5: [
            np.array([[0.74, 0.10], [0.30, 0.10]]),
            np.array([[0.30, 0.10], [0.28, 0.44]]),
            _arc(0.47, 0.65, 0.26, 0.24, -0.5 * pi, 0.8 * pi, 12),
        ],
        6: [
            np.array([[0.66, 0.08], [0.40, 0.34], [0.27, 0.62]]),
            _arc(0.5, 0.66, 0.24, 0.22, 0, 2 * pi, 18),
        ],
        7: [
            np.array([[0.22, 0.12], [0.78, 0.12]]),
            np.array([[0.78, 0.12], [0.40, 0.90]]),
        ],
        8: [
            _arc(0.5, 0.30, 0.21, 0.20, 0, 2 * pi, 18),
            _arc(0.5, 0.70, 0.25, 0.22, 0, 2 * pi, 18),
        ],
        9: [
            _arc(0.5, 0.34, 0.23, 0.22, 0, 2 * pi, 18),
            np.array([[0.72, 0.38], [0.68, 0.64], [0.56, 0.90]]),
        ],
    }


_STROKES = _digit_strokes()


def render_glyph(digit: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one jittered exemplar of a digit onto a 28x28 canvas."""
    if digit not in _STROKES:
        raise DataError(f"unknown digit class {digit}")
    rot = rng.uniform(-0.13, 0.13)
    shear = rng.uniform(-0.12, 0.12)
    sx, sy = rng.uniform(0.85, 1.08, size=2)
    tx, ty = rng.uniform(-0.05, 0.05, size=2)
    thickness = rng.uniform(1.1, 1.9)
    intensity = rng.uniform(0.85, 1.0)

    cos_r, sin_r = math.cos(rot), math.sin(rot)
    ink = np.zeros(DIGIT_SIZE * DIGIT_SIZE, dtype=np.float32)
    yy, xx = np.mgrid[0:DIGIT_SIZE, 0:DIGIT_SIZE]
    px = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)

    for stroke in _STROKES[digit]:
        pts = stroke + rng.normal(0.0, 0.015, size=stroke.shape)
        # affine about the glyph center, then map unit box -> 20px box at offset 4
        u = (pts[:, 0] - 0.5) * sx
        v = (pts[:, 1] - 0.5) * sy
        u2 = u * cos_r - v * sin_r + shear * v
        v2 = u * sin_r + v * cos_r
        qx = 4.0 + 20.0 * (u2 + 0.5 + tx)
        qy = 4.0 + 20.0 * (v2 + 0.5 + ty)
        q = np.stack([qx, qy], axis=1)
        for a, b in zip(q[:-1], q[1:]):
            ab = b - a
            len2 = float(ab @ ab)
            if len2 < 1e-12:
                d = np.linalg.norm(px - a, axis=1)
            else:
                t = np.clip((px - a) @ ab / len2, 0.0, 1.0)
                proj = a + t[:, None] * ab
                d = np.linalg.norm(px - proj, axis=1)
            ink = np.maximum(ink, np.clip((thickness - d), 0.0, 1.0).astype(np.float32))
    return (ink * intensity).reshape(DIGIT_SIZE, DIGIT_SIZE).astype(np.float32)


def glyph_digit_store(n_per_digit: int, seed: int, start_index: int = 0) -> dict[int, np.ndarray]:
    """Procedural exemplar store: digit -> [N, 28, 28] float32 in [0, 1].

    Exemplar i is a pure function of (seed, digit, start_index + i), so
    stores built over disjoint index ranges share no rasters.
    """
    store = {}
    for digit in range(10):
        stack = [render_glyph(digit, derive_rng(seed, 90, digit, start_index + i)) for i in range(n_per_digit)]
        store[digit] = np.stack(stack)
    return store


def mnist_digit_store(images_path, labels_path) -> dict[int, np.ndarray]:
    """Group MNIST IDX images by label into an exemplar store."""
    images = load_idx(images_path, rescale=True)
    labels = load_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError("image/label count mismatch")
    return {d: images[labels == d] for d in range(10)}


# -- construction rules ----------------------------------------------------


@dataclass(frozen=True)
class ConstructionRule:
    """Ordered digit parts with anchor offsets in part-size units."""

    parts: tuple[tuple[int, float, float], ...]

    def __post_init__(self):
        if len(self.parts) < 1:
            raise DataError("a rule needs at least one part")

    @property
    def k(self) -> int:
        return len(self.parts)

    @property
    def digits(self) -> tuple[int, ...]:
        return tuple(p[0] for p in self.parts)

    def extent(self) -> tuple[float, float]:
        """Object canvas size in part units (width, height)."""
        return (
            max(p[1] for p in self.parts) + 1.0,
            max(p[2] for p in self.parts) + 1.0,
        )


@dataclass(frozen=True)
class LegoClassSpec:
    class_id: int
    rule: ConstructionRule
    layout: str = ""


def _base_anchors(layout: str, k: int) -> list[tuple[float, float]]:
    if layout == "vertical":
        return [(0.0, float(i)) for i in range(k)]
    if layout == "horizontal":
        return [(float(i), 0.0) for i in range(k)]
    if layout == "diagonal":
        return [(0.62 * i, 0.62 * i) for i in range(k)]
    if layout == "l_shape":
        v = (k + 1) // 2
        anchors = [(0.0, float(i)) for i in range(v)]
        anchors += [(float(j - v + 1), float(v - 1)) for j in range(v, k)]
        return anchors
    raise DataError(f"unknown layout {layout!r}")


def make_ruleset(num_classes: int, k: int, seed: int) -> list[LegoClassSpec]:
    """Draw ``num_classes`` distinct (digit sequence, layout) rules.

    Anchors get a deterministic jitter so two classes never share an exact
    geometry even within a family.
    """
    if num_classes < 1 or k < 1:
        raise DataError("num_classes and k must be >= 1")
    capacity = (10**k) * len(LAYOUTS)
    if num_classes > capacity:
        raise DataError(f"cannot build {num_classes} distinct rules with K={k} (capacity {capacity})")
    rng = derive_rng(seed, 17)

    chosen: list[tuple[tuple[int, ...], int]] = []
    if capacity <= 8 * num_classes:
        combos = [(tuple((c // len(LAYOUTS)) // 10**i % 10 for i in range(k)), c % len(LAYOUTS)) for c in range(capacity)]
        order = rng.permutation(capacity)
        chosen = [combos[i] for i in order[:num_classes]]
    else:
        seen = set()
        while len(chosen) < num_classes:
            digits = tuple(int(d) for d in rng.integers(0, 10, size=k))
            fam = int(rng.integers(0, len(LAYOUTS)))
            if (digits, fam) not in seen:
                seen.add((digits, fam))
                chosen.append((digits, fam))

    specs = []
    for class_id, (digits, fam) in enumerate(chosen):
        layout = LAYOUTS[fam]
        anchors = _base_anchors(layout, k)
        jit = rng.uniform(-0.18, 0.18, size=(k, 2))
        ax = np.array([a[0] for a in anchors]) + jit[:, 0]
        ay = np.array([a[1] for a in anchors]) + jit[:, 1]
        ax -= ax.min()
        ay -= ay.min()
        # cap the jittered span at K part-units so a K-digit object always
        # fits a K*28 canvas at scale 1
        for arr in (ax, ay):
            span = arr.max()
            if span > k - 1.0 and span > 0:
                arr *= (k - 1.0) / span
        parts = tuple((digits[i], float(ax[i]), float(ay[i])) for i in range(k))
        specs.append(LegoClassSpec(class_id, ConstructionRule(parts), layout))
    return specs


# -- object composition ----------------------------------------------------


@dataclass
class LegoSample:
    image: np.ndarray
    class_id: int
    object_box: BBox
    part_boxes: list[BBox] = field(default_factory=list)


@dataclass
class Scene:
    image: np.ndarray
    class_id: int
    instances: list[BBox] = field(default_factory=list)
    preset: str = "easy"

    @property
    def count(self) -> int:
        return len(self.instances)


def ink_box(image: np.ndarray, threshold: float = INK_THRESHOLD) -> BBox:
    """Tight box around pixels above the ink threshold (max edges exclusive)."""
    mask = np.asarray(image) > threshold
    if not mask.any():
        raise DataError("no ink above threshold")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def compose_object(rule: ConstructionRule, digit_store: dict[int, np.ndarray], scale, rng: np.random.Generator,
                   class_id: int = -1) -> LegoSample:
    """Stack randomly drawn digit exemplars at the rule's anchors.

    ``scale`` is a scalar or an (sx, sy) pair in part-size multiples.
    Overlapping parts composite by max, keeping ink contrast.
    """
    sx, sy = (scale, scale) if np.isscalar(scale) else scale
    if sx <= 0 or sy <= 0:
        raise DataError("scale must be positive")
    part_w = max(2, int(round(DIGIT_SIZE * sx)))
    part_h = max(2, int(round(DIGIT_SIZE * sy)))
    ext_w, ext_h = rule.extent()
    canvas_w = int(math.ceil((ext_w - 1.0) * DIGIT_SIZE * sx)) + part_w
    canvas_h = int(math.ceil((ext_h - 1.0) * DIGIT_SIZE * sy)) + part_h
    canvas = np.zeros((canvas_h, canvas_w), dtype=np.float32)

    part_boxes = []
    for digit, dx, dy in rule.parts:
        if digit not in digit_store or len(digit_store[digit]) == 0:
            raise DataError(f"digit store has no exemplars for class {digit}")
        exemplars = digit_store[digit]
        raster = exemplars[int(rng.integers(0, len(exemplars)))]
        if raster.shape != (part_h, part_w):
            raster = bilinear_resize(raster, part_w, part_h)
        x0 = int(round(dx * DIGIT_SIZE * sx))
        y0 = int(round(dy * DIGIT_SIZE * sy))
        x0 = min(x0, canvas_w - part_w)
        y0 = min(y0, canvas_h - part_h)
        region = canvas[y0 : y0 + part_h, x0 : x0 + part_w]
        np.maximum(region, raster, out=region)
        part_boxes.append(ink_box(raster).shifted(x0, y0))

    object_box = part_boxes[0]
    for b in part_boxes[1:]:
        object_box = object_box.union(b)
    return LegoSample(canvas, class_id, object_box, part_boxes)


def add_background(image: np.ndarray, kind: str, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Composite blurred uniform noise under the object ink (max blend)."""
    if kind not in ("none", "texture"):
        raise DataError(f"unknown background kind {kind!r}")
    if not 0.0 <= strength <= 1.0:
        raise DataError("strength must lie in [0, 1]")
    if kind == "none" or strength == 0.0:
        return np.asarray(image, dtype=np.float32).copy()
    noise = rng.random(np.asarray(image).shape)
    for _ in range(3):
        noise = uniform_filter(noise, size=3, mode="reflect")
    bg = (noise * strength).astype(np.float32)
    return np.maximum(np.asarray(image, dtype=np.float32), bg)


class CombinationCount(NamedTuple):
    value: int
    saturated: bool


def count_combinations(n: int, k: int) -> CombinationCount:
    """Distinct digit-exemplar combinations N^K, saturating at int64 max."""
    if n < 0 or k < 0:
        raise DataError("N and K must be non-negative")
    exact = n**k
    if exact > _I64_MAX:
        return CombinationCount(_I64_MAX, True)
    return CombinationCount(exact, False)


# -- dataset emission ------------------------------------------------------


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _paste(canvas: np.ndarray, tile: np.ndarray, x0: int, y0: int) -> None:
    h, w = tile.shape
    region = canvas[y0 : y0 + h, x0 : x0 + w]
    np.maximum(region, tile, out=region)


def make_classification_sample(spec: LegoClassSpec, digit_store, canvas_size: int, noise: float,
                               rng: np.random.Generator, scale=1.0) -> LegoSample:
    """One object pasted at a random position on a noisy square canvas."""
    obj = compose_object(spec.rule, digit_store, scale, rng, class_id=spec.class_id)
    oh, ow = obj.image.shape
    if ow > canvas_size or oh > canvas_size:
        raise DataError(f"canvas {canvas_size} too small for object {ow}x{oh} of class {spec.class_id}")
    x0 = int(rng.integers(0, canvas_size - ow + 1))
    y0 = int(rng.integers(0, canvas_size - oh + 1))
    canvas = np.zeros((canvas_size, canvas_size), dtype=np.float32)
    _paste(canvas, obj.image, x0, y0)
    canvas = add_background(canvas, "texture" if noise > 0 else "none", noise, rng)
    return LegoSample(
        canvas,
        spec.class_id,
        obj.object_box.shifted(x0, y0),
        [b.shifted(x0, y0) for b in obj.part_boxes],
    )


def gen_classification_set(ruleset: list[LegoClassSpec], n_train: int, n_test: int, out_dir,
                           canvas: int = 84, noise: float = 0.3, seed: int = 0, scale=1.0,
                           pool_per_digit: int = 200, train_store=None, test_store=None,
                           run_config: dict | None = None) -> dict:
    """Emit balanced train/test single-object sets with disjoint exemplar pools.

    Writes {split}_images.tnsr (uint8 stacks) and {split}_annotations.jsonl
    into ``out_dir``; returns the paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_store is None:
        train_store = glyph_digit_store(pool_per_digit, seed, start_index=0)
    if test_store is None:
        test_store = glyph_digit_store(pool_per_digit, seed, start_index=pool_per_digit)

    paths = {}
    for split_idx, (split, n_per_class, store) in enumerate(
        [("train", n_train, train_store), ("test", n_test, test_store)]
    ):
        images = np.zeros((len(ruleset) * n_per_class, canvas, canvas), dtype=np.uint8)
        annotations = []
        i = 0
        for spec in ruleset:
            for j in range(n_per_class):
                rng = derive_rng(seed, 1 + split_idx, spec.class_id, j)
                sample = make_classification_sample(spec, store, canvas, noise, rng, scale=scale)
                images[i] = quantize(sample.image)
                annotations.append(
                    SceneAnnotation(
                        image_id=f"{split}_{spec.class_id:03d}_{j:05d}",
                        class_id=spec.class_id,
                        count=1,
                        boxes=[sample.object_box],
                    )
                )
                i += 1
        tensors = {"images": images}
        if run_config is not None:
            tensors["__run_config__"] = pack_json(run_config)
        img_path = out_dir / f"{split}_images.tnsr"
        ann_path = out_dir / f"{split}_annotations.jsonl"
        write_container(img_path, tensors)
        save_annotations(ann_path, annotations, meta=run_config)
        paths[split] = (img_path, ann_path)
    return paths


# -- scenes ----------------------------------------------------------------

PRESET_FRACTIONS = {"easy": 0.25, "big_o": 0.78, "parallel": 0.35, "close_by": 0.13}
EASY_SEPARATION = 1.5
PARALLEL_GAP = (0.10, 0.30)
CLOSE_BY_GAP = (0.02, 0.10)
_MARGIN = 2

# Glyph ink spans roughly 20px of the 28px tile (4px margins), so the ink
# box of a composed object is smaller than its part grid.
_INK_SPAN = 20


def _ink_extent(rule: ConstructionRule):
    ext_w, ext_h = rule.extent()
    return ((ext_w - 1.0) * DIGIT_SIZE + _INK_SPAN, (ext_h - 1.0) * DIGIT_SIZE + _INK_SPAN)


def preset_scale(preset: str, rule: ConstructionRule, canvas: int):
    """Scale (sx, sy) putting the object's ink box at the preset fraction."""
    if preset not in PRESET_FRACTIONS:
        raise DataError(f"unknown preset {preset!r}")
    base_w, base_h = _ink_extent(rule)
    frac = PRESET_FRACTIONS[preset]
    if preset == "big_o":
        # stretch each axis independently so the box fills >= 0.7 canvas both ways
        return (frac * canvas / base_w, frac * canvas / base_h)
    s = frac * canvas / max(base_w, base_h)
    return (s, s)


def crop_to_ink(sample: LegoSample) -> LegoSample:
    """Trim a composed object's raster to its ink box."""
    box = sample.object_box
    x0, y0 = int(box.x_min), int(box.y_min)
    x1, y1 = int(box.x_max), int(box.y_max)
    return LegoSample(
        sample.image[y0:y1, x0:x1].copy(),
        sample.class_id,
        box.shifted(-x0, -y0),
        [b.shifted(-x0, -y0) for b in sample.part_boxes],
    )


def _compose_instances(spec, digit_store, scale, rng, m):
    return [crop_to_ink(compose_object(spec.rule, digit_store, scale, rng, class_id=spec.class_id)) for _ in range(m)]


def _compose_big(spec, digit_store, scale, rng, canvas, rounds=3):
    """Rescale against the measured ink box until it fills >= 0.7 canvas
    on both axes (the nominal target is 0.78)."""
    target = PRESET_FRACTIONS["big_o"] * canvas
    sx, sy = scale
    obj = None
    for _ in range(rounds):
        obj = crop_to_ink(compose_object(spec.rule, digit_store, (sx, sy), rng, class_id=spec.class_id))
        bw, bh = obj.object_box.width, obj.object_box.height
        if min(bw, bh) >= 0.7 * canvas and max(bw, bh) <= canvas - 2 * _MARGIN:
            return obj
        sx = min(sx * target / bw, sx * (canvas - 2 * _MARGIN) / bw)
        sy = min(sy * target / bh, sy * (canvas - 2 * _MARGIN) / bh)
    return crop_to_ink(compose_object(spec.rule, digit_store, (sx, sy), rng, class_id=spec.class_id))


def _place_easy(objs, canvas, rng, max_tries=200):
    placed = []
    boxes = []
    diags = [math.hypot(o.object_box.width, o.object_box.height) for o in objs]
    for idx, obj in enumerate(objs):
        oh, ow = obj.image.shape
        hi_x, hi_y = canvas - _MARGIN - ow, canvas - _MARGIN - oh
        if hi_x < _MARGIN or hi_y < _MARGIN:
            return None
        for _ in range(max_tries):
            x0 = int(rng.integers(_MARGIN, hi_x + 1))
            y0 = int(rng.integers(_MARGIN, hi_y + 1))
            box = obj.object_box.shifted(x0, y0)
            cx, cy = box.center
            ok = True
            for jdx, other in enumerate(boxes):
                ox, oy = other.center
                need = EASY_SEPARATION * max(diags[idx], diags[jdx])
                if math.hypot(cx - ox, cy - oy) < need:
                    ok = False
                    break
            if ok:
                placed.append((x0, y0))
                boxes.append(box)
                break
        else:
            return None
    return placed


def _place_row(objs, canvas, rng, gap_range, min_gap_px):
    """Adjacent instances with exact integer gaps between ink boxes.

    The row runs along the axis perpendicular to the objects' long side
    (wide objects stack vertically); gaps are fractions of object width.
    """
    widths = [int(o.object_box.width) for o in objs]
    heights = [int(o.object_box.height) for o in objs]
    mean_w = float(np.mean(widths))
    horizontal = float(np.mean(heights)) >= mean_w
    along = widths if horizontal else heights
    across = heights if horizontal else widths
    gaps = [max(min_gap_px, int(round(float(rng.uniform(*gap_range)) * mean_w))) for _ in range(len(objs) - 1)]
    total = sum(along) + sum(gaps)
    max_across = max(across)
    if total > canvas - 2 * _MARGIN or max_across > canvas - 2 * _MARGIN:
        return None
    start = int(rng.integers(_MARGIN, canvas - _MARGIN - total + 1))
    mid = float(rng.uniform(_MARGIN + max_across / 2, canvas - _MARGIN - max_across / 2))
    placed = []
    cursor = start
    for i, obj in enumerate(objs):
        jitter = float(rng.uniform(-2.0, 2.0)) if len(objs) > 1 else 0.0
        oh, ow = obj.image.shape
        if horizontal:
            x0 = cursor - int(obj.object_box.x_min)
            y0 = int(round(mid - heights[i] / 2 - obj.object_box.y_min + jitter))
            y0 = int(np.clip(y0, 0, canvas - oh))
            if x0 < 0 or x0 + ow > canvas:
                return None
        else:
            y0 = cursor - int(obj.object_box.y_min)
            x0 = int(round(mid - widths[i] / 2 - obj.object_box.x_min + jitter))
            x0 = int(np.clip(x0, 0, canvas - ow))
            if y0 < 0 or y0 + oh > canvas:
                return None
        placed.append((x0, y0))
        cursor += along[i] + (gaps[i] if i < len(gaps) else 0)
    return placed


def gen_scene(spec: LegoClassSpec, m: int, preset: str, canvas: int, rng: np.random.Generator,
              digit_store=None, noise: float = 0.3, max_restarts: int = 40) -> Scene:
    """Compose an m-instance scene under a difficulty preset.

    easy: well separated; big_o: one canvas-filling instance; parallel:
    row of mid-sized instances with small box gaps; close_by: row of small
    instances nearly touching.
    """
    if m < 0:
        raise DataError("instance count must be >= 0")
    if preset not in PRESET_FRACTIONS:
        raise DataError(f"unknown preset {preset!r}")
    if digit_store is None:
        digit_store = glyph_digit_store(40, 7, start_index=0)
    if preset == "big_o":
        m = min(m, 1)
    if m == 0:
        image = add_background(np.zeros((canvas, canvas), dtype=np.float32), "texture" if noise > 0 else "none", noise, rng)
        return Scene(image, spec.class_id, [], preset)

    scale = preset_scale(preset, spec.rule, canvas)
    for _ in range(max_restarts):
        if preset == "big_o":
            objs = [_compose_big(spec, digit_store, scale, rng, canvas)]
            obj = objs[0]
            oh, ow = obj.image.shape
            x0 = (canvas - ow) // 2 + int(rng.integers(-3, 4))
            y0 = (canvas - oh) // 2 + int(rng.integers(-3, 4))
            placed = [(int(np.clip(x0, 0, canvas - ow)), int(np.clip(y0, 0, canvas - oh)))]
        else:
            objs = _compose_instances(spec, digit_store, scale, rng, m)
            if preset == "easy":
                placed = _place_easy(objs, canvas, rng)
            elif preset == "parallel":
                placed = _place_row(objs, canvas, rng, PARALLEL_GAP, min_gap_px=1)
            else:
                placed = _place_row(objs, canvas, rng, CLOSE_BY_GAP, min_gap_px=0)
        if placed is None:
            # shrink and retry: some (layout, m) combinations need smaller
            # instances than the preset's nominal fraction
            scale = (scale[0] * 0.9, scale[1] * 0.9)
            continue
        image = np.zeros((canvas, canvas), dtype=np.float32)
        boxes = []
        for obj, (x0, y0) in zip(objs, placed):
            _paste(image, obj.image, x0, y0)
            boxes.append(obj.object_box.shifted(x0, y0))
        image = add_background(image, "texture" if noise > 0 else "none", noise, rng)
        return Scene(image, spec.class_id, boxes, preset)
    raise DataError(f"could not place {m} instances for preset {preset!r} after {max_restarts} restarts")


def parse_instances(text: str) -> tuple[int, int]:
    """Parse '3' or '1-4' into an inclusive (lo, hi) range."""
    if "-" in text:
        lo, hi = text.split("-", 1)
        lo, hi = int(lo), int(hi)
    else:
        lo = hi = int(text)
    if lo < 0 or hi < lo:
        raise DataError(f"bad instance range {text!r}")
    return lo, hi


def gen_scene_set(ruleset: list[LegoClassSpec], n_scenes: int, preset: str, out_dir,
                  instances=(1, 4), canvas: int = 168, noise: float = 0.3, seed: int = 0,
                  pool_per_digit: int = 120, digit_store=None,
                  run_config: dict | None = None):
    """Emit a scene set: scenes_images.tnsr + scenes_annotations.jsonl."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if digit_store is None:
        digit_store = glyph_digit_store(pool_per_digit, seed, start_index=0)
    lo, hi = instances if isinstance(instances, tuple) else parse_instances(str(instances))
    images = np.zeros((n_scenes, canvas, canvas), dtype=np.uint8)
    annotations = []
    for i in range(n_scenes):
        rng = derive_rng(seed, 3, i)
        spec = ruleset[int(rng.integers(0, len(ruleset)))]
        m = int(rng.integers(lo, hi + 1))
        scene = gen_scene(spec, m, preset, canvas, rng, digit_store=digit_store, noise=noise)
        images[i] = quantize(scene.image)
        annotations.append(
            SceneAnnotation(
                image_id=f"{preset}_{i:05d}",
                class_id=scene.class_id,
                count=scene.count,
                boxes=scene.instances,
            )
        )
    tensors = {"images": images}
    if run_config is not None:
        tensors["__run_config__"] = pack_json(run_config)
    img_path = out_dir / "scenes_images.tnsr"
    ann_path = out_dir / "scenes_annotations.jsonl"
    write_container(img_path, tensors)
    save_annotations(ann_path, annotations, meta=run_config)
    return img_path, ann_path
