"""End-to-end runners for both orderings of counting and pointing.

run_c2p predicts a bounded count from deep features first, then fits that
many Gaussian components to the last-stage heatmap; pointers are the
component ellipses. run_p2c classifies first, prunes the heatmap with the
class signature, and reads count and box pointers simultaneously off one
density-peak clustering, so they can never disagree.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import (
    DELTA_MIN_FRACTION,
    DENSITY_KERNEL_FRACTION,
    RHO_MIN_FRACTION,
    cluster_pointers,
    density_peaks,
    gmm_fit,
    gmm_pointers,
    heatmap_to_points,
)
from .counthead import CountLabel, LinearSvmModel, extract_count_features, svm_predict
from .errors import DataError
from .grids import BBox, Ellipse, Heatmap, channel_stack, normalize_subtract_scaled_mean, upscale_heatmap
from .net import Network
from .signatures import SignatureDictionary, feature_selected_heatmap, top_features


@dataclass
class PncOutput:
    """Joint result: how many objects, and a pointer locating each."""

    image_id: str
    method: str
    count: int | CountLabel
    pointers: list = field(default_factory=list)
    predicted_class: int | None = None
    heatmap: Heatmap | None = None

    @property
    def count_value(self) -> int:
        return self.count.value if isinstance(self.count, CountLabel) else int(self.count)

    def count_matches(self, true_count: int) -> bool:
        if isinstance(self.count, CountLabel):
            return self.count.matches(true_count)
        return int(self.count) == int(true_count)


def _prepare_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / np.float32(255.0)
    return img.astype(np.float32, copy=False)


def last_stage_heatmap(trace: dict[str, np.ndarray], net: Network, width: int, height: int) -> Heatmap:
    """Channel sum of the deepest post-ReLU conv stage, 2x-mean clamped,
    upscaled to image size."""
    stage = net.conv_stage_names()[-1]
    maps = list(trace[stage])
    hm = channel_stack(maps)
    hm = normalize_subtract_scaled_mean(hm, k=2.0)
    return upscale_heatmap(hm, width, height)


def c2p_pointers_from_heatmap(hm: Heatmap, count: int, seed: int = 0) -> list[Ellipse]:
    """Fit ``count`` mixture components to the heatmap mass.

    Degenerate heat (fewer hot cells than components) caps the number of
    fitted components at the available points.
    """
    if count <= 0:
        return []
    points = heatmap_to_points(hm, threshold=0.0)
    n_fit = min(count, len(points))
    if n_fit == 0:
        return []
    model = gmm_fit(points, n_fit, seed=seed)
    return gmm_pointers(model)


def run_c2p(image, net: Network, svm: LinearSvmModel, image_id: str = "", seed: int = 0) -> PncOutput:
    """Count with the SVM head, then point with that many ellipses."""
    img = _prepare_image(image)
    h, w = img.shape
    scores, trace = net.forward_with_trace(img)
    label = svm_predict(svm, extract_count_features(trace))
    hm = last_stage_heatmap(trace, net, w, h)
    pointers = c2p_pointers_from_heatmap(hm, label.value, seed=seed)
    return PncOutput(image_id, "c2p", label, pointers, int(np.argmax(scores)), hm)


def run_p2c(image, net: Network, dictionary: SignatureDictionary, image_id: str = "",
            k_last: int = 20, k_prev: int = 50) -> PncOutput:
    """Classify, prune the heatmap by class signature, cluster once.

    Count and pointers come from the same clustering result; an empty
    post-normalization point set means zero objects.
    """
    img = _prepare_image(image)
    h, w = img.shape
    scores, trace = net.forward_with_trace(img)
    predicted_class = int(np.argmax(scores))
    selection = top_features(dictionary, predicted_class, k_last, k_prev)
    hm = feature_selected_heatmap(trace, selection, w, h)
    points = heatmap_to_points(hm, threshold=0.0)
    if len(points) == 0:
        return PncOutput(image_id, "p2c", 0, [], predicted_class, hm)
    diagonal = math.hypot(w, h)
    result = density_peaks(
        points,
        d_c=DENSITY_KERNEL_FRACTION * diagonal,
        rho_min=RHO_MIN_FRACTION,
        delta_min=DELTA_MIN_FRACTION * diagonal,
    )
    pointers = cluster_pointers(result, points)
    return PncOutput(image_id, "p2c", result.count, pointers, predicted_class, hm)


# -- result serialization ---------------------------------------------------


def pointer_to_json(pointer):
    if isinstance(pointer, BBox):
        return {"type": "box", "coords": [round(float(v), 3) for v in pointer.as_list()]}
    if isinstance(pointer, Ellipse):
        return {
            "type": "ellipse",
            "center": [round(float(pointer.cx), 3), round(float(pointer.cy), 3)],
            "semi_axes": [round(float(pointer.sx), 3), round(float(pointer.sy), 3)],
        }
    raise DataError(f"unknown pointer type {type(pointer).__name__}")


def pointer_from_json(obj):
    if obj.get("type") == "box":
        return BBox(*obj["coords"])
    if obj.get("type") == "ellipse":
        (cx, cy), (sx, sy) = obj["center"], obj["semi_axes"]
        return Ellipse(cx, cy, sx, sy)
    raise DataError(f"unknown pointer record {obj!r}")


def output_to_json(out: PncOutput) -> dict:
    return {
        "image_id": out.image_id,
        "method": out.method,
        "count": str(out.count) if isinstance(out.count, CountLabel) else int(out.count),
        "pointers": [pointer_to_json(p) for p in out.pointers],
        "class": out.predicted_class,
    }


def output_from_json(rec: dict, c_max: int = 4) -> PncOutput:
    raw = rec["count"]
    if isinstance(raw, str) and raw.endswith("+"):
        count = CountLabel(int(raw[:-1]), c_max)
    elif rec.get("method") == "c2p":
        count = CountLabel(int(raw), c_max)
    else:
        count = int(raw)
    return PncOutput(
        image_id=str(rec["image_id"]),
        method=str(rec.get("method", "")),
        count=count,
        pointers=[pointer_from_json(p) for p in rec.get("pointers", [])],
        predicted_class=rec.get("class"),
    )


def save_results(path, outputs: list[PncOutput], meta: dict | None = None) -> None:
    """JSON-lines results, sorted by image id for canonical output."""
    with open(path, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"_run_config": meta}, sort_keys=True) + "\n")
        for out in sorted(outputs, key=lambda o: o.image_id):
            fh.write(json.dumps(output_to_json(out), sort_keys=True) + "\n")


def load_results(path) -> list[PncOutput]:
    outputs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if "_run_config" in rec:
                continue
            outputs.append(output_from_json(rec))
    return outputs
