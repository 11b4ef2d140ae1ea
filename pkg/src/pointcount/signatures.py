"""Per-class feature-map signatures.

For every class, the channels of the two deepest conv stages are ranked by
their class-averaged peak activation. At inference the top-ranked channels
for the predicted class are upscaled, summed and mean-clamped into a
feature-selected heatmap that suppresses off-class activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import pack_json, read_container, unpack_json, write_container
from .errors import DataError
from .grids import Heatmap, bilinear_resize, channel_stack, global_max_pool, normalize_subtract_scaled_mean
from .net import Network

DEFAULT_K_LAST = 20
DEFAULT_K_PREV = 50


@dataclass
class SignatureDictionary:
    """class_id -> per-layer channel ranking by average peak activation.

    ``layers`` lists the ranked stages deepest-first; rankings[class][layer]
    is (channels sorted by score descending, the scores themselves).
    """

    layers: list[str]
    rankings: dict[int, dict[str, tuple[np.ndarray, np.ndarray]]] = field(default_factory=dict)

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.rankings)

    def ranked(self, class_id: int, layer: str):
        if class_id not in self.rankings:
            raise DataError(f"class {class_id} not in dictionary")
        return self.rankings[class_id][layer]


@dataclass(frozen=True)
class FeatureSelection:
    """Chosen (layer, channel) pairs, deepest layer first."""

    entries: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if not self.entries:
            raise DataError("empty feature selection")

    def __len__(self):
        return len(self.entries)


def signature_layers(net: Network) -> list[str]:
    """The two deepest post-ReLU conv stages, deepest first."""
    stages = net.conv_stage_names()
    if len(stages) < 2:
        raise DataError("network has fewer than two conv stages")
    return [stages[-1], stages[-2]]


def build_dictionary(images, labels, net: Network) -> SignatureDictionary:
    """Average the per-sample peak activations per class and rank channels.

    ``images`` may be uint8 (rescaled to [0,1]) or float arrays; every class
    id present in ``labels`` needs at least one sample.
    """
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise DataError("images/labels length mismatch")
    if len(labels) == 0:
        raise DataError("cannot build a dictionary from zero samples")
    layers = signature_layers(net)

    sums: dict[int, dict[str, np.ndarray]] = {}
    counts: dict[int, int] = {}
    for i in range(len(images)):
        img = images[i]
        if img.dtype == np.uint8:
            img = img.astype(np.float32) / np.float32(255.0)
        _, trace = net.forward_with_trace(img)
        cid = int(labels[i])
        if cid not in sums:
            sums[cid] = {layer: np.zeros(trace[layer].shape[0], dtype=np.float64) for layer in layers}
            counts[cid] = 0
        for layer in layers:
            sums[cid][layer] += global_max_pool(trace[layer]).astype(np.float64)
        counts[cid] += 1

    rankings = {}
    for cid, per_layer in sums.items():
        rankings[cid] = {}
        for layer in layers:
            mean = per_layer[layer] / counts[cid]
            order = np.argsort(-mean, kind="stable")
            rankings[cid][layer] = (order.astype(np.int64), mean[order])
    return SignatureDictionary(layers, rankings)


def top_features(dictionary: SignatureDictionary, class_id: int,
                 k_last: int = DEFAULT_K_LAST, k_prev: int = DEFAULT_K_PREV) -> FeatureSelection:
    """First k_last channels of the deepest stage plus k_prev of the previous."""
    if class_id not in dictionary.rankings:
        raise DataError(f"class {class_id} not in dictionary")
    last, prev = dictionary.layers[0], dictionary.layers[1]
    entries = []
    for layer, k in ((last, k_last), (prev, k_prev)):
        order, _ = dictionary.ranked(class_id, layer)
        if k > len(order):
            raise DataError(f"requested top {k} of {len(order)} channels in {layer}")
        entries.extend((layer, int(ch)) for ch in order[:k])
    return FeatureSelection(tuple(entries))


def feature_selected_heatmap(trace: dict[str, np.ndarray], selection: FeatureSelection,
                             image_width: int, image_height: int) -> Heatmap:
    """Upscale the selected maps to image size, sum, subtract 2x mean, clamp."""
    maps = []
    for layer, ch in selection.entries:
        if layer not in trace:
            raise DataError(f"layer {layer!r} missing from trace")
        fmaps = trace[layer]
        if ch >= fmaps.shape[0]:
            raise DataError(f"channel {ch} out of range for layer {layer!r}")
        maps.append(bilinear_resize(fmaps[ch], image_width, image_height))
    stacked = channel_stack(maps, image_width, image_height)
    return normalize_subtract_scaled_mean(stacked, k=2.0)


def save_dictionary(path, dictionary: SignatureDictionary, run_config: dict | None = None) -> None:
    """Rankings as float32 tensors [n, 3] of (layer index, channel, score)."""
    tensors = {}
    for cid in dictionary.class_ids:
        rows = []
        for li, layer in enumerate(dictionary.layers):
            order, scores = dictionary.rankings[cid][layer]
            rows.append(np.stack([np.full(len(order), li, dtype=np.float32),
                                  order.astype(np.float32),
                                  scores.astype(np.float32)], axis=1))
        tensors[f"class_{cid:05d}"] = np.concatenate(rows, axis=0)
    tensors["__meta__"] = pack_json({"layers": dictionary.layers, "classes": dictionary.class_ids})
    if run_config is not None:
        tensors["__run_config__"] = pack_json(run_config)
    write_container(path, tensors)


def load_dictionary(path) -> SignatureDictionary:
    tensors = read_container(path)
    meta = unpack_json(tensors["__meta__"])
    layers = list(meta["layers"])
    rankings = {}
    for cid in meta["classes"]:
        rows = tensors[f"class_{cid:05d}"]
        per_layer = {}
        for li, layer in enumerate(layers):
            sel = rows[rows[:, 0] == li]
            per_layer[layer] = (sel[:, 1].astype(np.int64), sel[:, 2].astype(np.float64))
        rankings[int(cid)] = per_layer
    return SignatureDictionary(layers, rankings)
