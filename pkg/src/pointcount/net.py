"""Small convolutional classifier trained from scratch with plain numpy.

Architecture: four 5x5 conv stages (stride 1, pad 2, each followed by ReLU
and 2x2 max pooling), a 1x1 channel-mixing stage projecting to one map per
class, global average pooling and softmax. The network is fully
convolutional, so it runs on inputs larger than the training canvas.

Convolutions run as im2col + GEMM in float32. Activations are kept in
channels-last [B,H,W,C] layout internally, which turns every GEMM input
and output into a plain reshape; the public trace API still reports
channels-first [C,H,W] maps. A float64 check mode exists for
finite-difference gradient verification. Training is deterministic for a
fixed seed: fixed shuffle, fixed reduction order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import pack_json, read_container, unpack_json, write_container
from .errors import DataError, NumericError
from .lego import derive_rng


def gather_windows(x, k, pad):
    """im2col for stride-1 kxk windows on channels-last input.

    Returns (B*H*W, k*k*C) with columns ordered (row offset, col offset,
    channel). Built row-offset by row-offset from a flattened sliding view
    so every copy moves k*C-long contiguous runs.
    """
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    kc = k * c
    flat = xp.reshape(b, h + 2 * pad, (w + 2 * pad) * c)
    sw = np.lib.stride_tricks.sliding_window_view(flat, kc, axis=2)
    col = np.empty((b, h, w, k, kc), dtype=x.dtype)
    for i in range(k):
        col[:, :, :, i, :] = sw[:, i : i + h, 0 : w * c : c, :]
    return col.reshape(b * h * w, k * kc)


class Conv2d:
    """Stride-1 convolution with symmetric zero padding (covers 1x1 mixing).

    Weights are stored as (k * k * c_in, c_out) with rows ordered (row
    offset, col offset, channel) to match gather_windows. ``input_grad``
    can be switched off on the first layer, where nothing consumes dx.
    """

    def __init__(self, name, c_in, c_out, k, pad, rng=None, dtype=np.float32, input_grad=True):
        self.name = name
        self.c_in, self.c_out, self.k, self.pad = c_in, c_out, k, pad
        self.input_grad = input_grad
        fan_in = c_in * k * k
        if rng is None:
            rng = np.random.default_rng(0)
        self.w = (rng.standard_normal((fan_in, c_out)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.dw = None
        self.db = None
        self._cache = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}

    def forward(self, x, cache=False):
        b, h, w, c = x.shape
        if c != self.c_in:
            raise DataError(f"{self.name}: expected {self.c_in} input channels, got {c}")
        x = x.astype(self.w.dtype, copy=False)
        col = x.reshape(-1, c) if self.k == 1 else gather_windows(x, self.k, self.pad)
        y = col.dot(self.w)
        y += self.b
        if cache:
            self._cache = (col, x.shape)
        return y.reshape(b, h, w, self.c_out)

    def backward(self, dy):
        col, x_shape = self._cache
        b, h, w, c = x_shape
        dy_mat = dy.reshape(-1, self.c_out)
        self.dw = col.T @ dy_mat
        self.db = dy_mat.sum(axis=0)
        self._cache = None
        if not self.input_grad:
            return None
        dcol = dy_mat @ self.w.T
        if self.k == 1:
            return dcol.reshape(b, h, w, c)
        p = self.pad
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=dcol.dtype)
        dc = dcol.reshape(b, h, w, self.k * self.k, c)
        for i in range(self.k):
            for j in range(self.k):
                dxp[:, i : i + h, j : j + w, :] += dc[:, :, :, i * self.k + j, :]
        return dxp[:, p : p + h, p : p + w, :]


class ReLU:
    """Clamps in place: the upstream conv output has no other consumer."""

    def __init__(self, name):
        self.name = name
        self._y = None

    def params(self):
        return {}

    def forward(self, x, cache=False):
        y = np.maximum(x, 0, out=x)
        if cache:
            self._y = y
        return y

    def backward(self, dy):
        dx = dy * (self._y > 0)
        self._y = None
        return dx


class MaxPool2:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximal position in window order,
    keeping backward deterministic.
    """

    def __init__(self, name):
        self.name = name
        self._cache = None

    def params(self):
        return {}

    def forward(self, x, cache=False):
        b, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        if h2 == 0 or w2 == 0:
            raise DataError(f"{self.name}: input {h}x{w} too small to pool")
        quads = (
            x[:, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2, :],
            x[:, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2, :],
            x[:, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2, :],
            x[:, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2, :],
        )
        m01 = np.maximum(quads[0], quads[1])
        m23 = np.maximum(quads[2], quads[3])
        y = np.maximum(m01, m23)
        if cache:
            # first-maximal-quadrant index in the fixed order above
            i01 = (quads[1] > quads[0]).astype(np.int8)
            i23 = (quads[3] > quads[2]).astype(np.int8)
            idx = np.where(m23 > m01, 2 + i23, i01)
            self._cache = (idx, x.shape)
        return y

    def backward(self, dy):
        idx, x_shape = self._cache
        b, h, w, c = x_shape
        h2, w2 = h // 2, w // 2
        dx = np.zeros(x_shape, dtype=dy.dtype)
        dx[:, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2, :] = dy * (idx == 0)
        dx[:, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2, :] = dy * (idx == 1)
        dx[:, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2, :] = dy * (idx == 2)
        dx[:, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2, :] = dy * (idx == 3)
        self._cache = None
        return dx


class GlobalAvgPool:
    def __init__(self, name):
        self.name = name
        self._hw = None

    def params(self):
        return {}

    def forward(self, x, cache=False):
        _, h, w, _ = x.shape
        self._hw = (h, w)
        return x.mean(axis=(1, 2))

    def backward(self, dy):
        h, w = self._hw
        b, c = dy.shape
        return np.broadcast_to(dy[:, None, None, :], (b, h, w, c)).copy() / (h * w)


class Softmax:
    def __init__(self, name):
        self.name = name
        self._probs = None

    def params(self):
        return {}

    def forward(self, x, cache=False):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        if cache:
            self._probs = p
        return p

    def backward(self, dy):
        p = self._probs
        self._probs = None
        return p * (dy - np.sum(dy * p, axis=1, keepdims=True))


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 2
    seed: int = 0
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DataError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")


class Network:
    """Ordered named layers; class scores come out of the final softmax."""

    def __init__(self, layers, class_count, input_size=84):
        self.layers = layers
        self.class_count = class_count
        self.input_size = input_size

    @property
    def layer_names(self):
        return [layer.name for layer in self.layers]

    def conv_stage_names(self):
        """Names of the post-ReLU conv outputs, in network order."""
        return [n for n in self.layer_names if n.startswith("relu")]

    def parameter_layers(self):
        return [l for l in self.layers if l.params()]

    def astype(self, dtype):
        for layer in self.parameter_layers():
            layer.w = layer.w.astype(dtype)
            layer.b = layer.b.astype(dtype)
        return self

    def forward(self, x, cache=False):
        """x: [B,H,W] or [B,H,W,1] -> class probabilities [B, class_count]."""
        if x.ndim == 3:
            x = x[..., None]
        for layer in self.layers:
            x = layer.forward(x, cache=cache)
        return x

    def forward_with_trace(self, image):
        """Single image [H,W] -> (scores, {layer name: output}).

        Spatial trace entries are reported channels-first [C,H,W]; pooled
        entries are vectors.
        """
        img = np.asarray(image, dtype=np.float32)
        if img.ndim == 3 and img.shape[0] == 1:
            img = img[0]
        if img.ndim != 2:
            raise DataError(f"expected a single-channel image, got shape {np.asarray(image).shape}")
        x = img[None, :, :, None]
        trace = {}
        for layer in self.layers:
            x = layer.forward(x, cache=False)
            trace[layer.name] = x[0].transpose(2, 0, 1).copy() if x.ndim == 4 else x[0].copy()
        return x[0], trace


def build_network(class_count, channels=(32, 64, 128, 256), seed=0, input_size=84):
    layers = []
    c_in = 1
    for i, c_out in enumerate(channels, start=1):
        layers.append(Conv2d(f"conv{i}", c_in, c_out, k=5, pad=2, rng=derive_rng(seed, 40, i),
                             input_grad=(i > 1)))
        layers.append(ReLU(f"relu{i}"))
        layers.append(MaxPool2(f"pool{i}"))
        c_in = c_out
    layers.append(Conv2d("nin", c_in, class_count, k=1, pad=0, rng=derive_rng(seed, 40, 99)))
    layers.append(GlobalAvgPool("gap"))
    layers.append(Softmax("softmax"))
    return Network(layers, class_count, input_size)


def loss_and_grads(net: Network, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradients w.r.t. every parameter.

    Softmax and the loss are fused, so backward starts at the logits.
    """
    if x.shape[0] == 0:
        raise DataError("empty batch")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= net.class_count:
        raise DataError(f"label out of range [0, {net.class_count})")
    probs = net.forward(x, cache=True)
    b = x.shape[0]
    eps = np.finfo(probs.dtype).tiny
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(b), labels], eps))))
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    net.layers[-1]._probs = None
    grad = dlogits
    for layer in reversed(net.layers[:-1]):
        grad = layer.backward(grad)
        if grad is None:
            break
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    grads = {}
    for layer in net.parameter_layers():
        for pname, g in layer.grads().items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"gradient {layer.name}.{pname} is not finite")
            grads[f"{layer.name}.{pname}"] = g
    return loss, grads, probs


def backward(net: Network, batch: np.ndarray, labels: np.ndarray):
    """Named mean-cross-entropy gradients for a batch."""
    _, grads, _ = loss_and_grads(net, batch, labels)
    return grads


def gradient_check(net: Network, x: np.ndarray, labels: np.ndarray, h: float = 1e-3,
                   max_entries: int = 12, rng=None):
    """Max relative error of analytic vs central-difference gradients.

    Probes up to ``max_entries`` coordinates per parameter tensor. Run on a
    float64 network (``net.astype(np.float64)``).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x = x.astype(np.float64)
    _, grads, _ = loss_and_grads(net, x, labels)
    worst = 0.0
    for layer in net.parameter_layers():
        for pname, param in layer.params().items():
            flat = param.reshape(-1)
            g = grads[f"{layer.name}.{pname}"].reshape(-1)
            n = flat.shape[0]
            picks = rng.choice(n, size=min(max_entries, n), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + h
                lp = loss_and_grads(net, x, labels)[0]
                flat[i] = orig - h
                lm = loss_and_grads(net, x, labels)[0]
                flat[i] = orig
                numeric = (lp - lm) / (2 * h)
                denom = max(abs(numeric), abs(g[i]), 1e-6)
                worst = max(worst, abs(numeric - g[i]) / denom)
    return worst


def _iter_batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def _as_input(images, idx):
    x = images[idx]
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / np.float32(255.0)
    else:
        x = x.astype(np.float32, copy=False)
    return x


def predict(net: Network, images, batch_size: int = 64) -> np.ndarray:
    """Argmax class per image, evaluated in batches."""
    out = np.empty(len(images), dtype=np.int64)
    for idx in _iter_batches(len(images), batch_size):
        probs = net.forward(_as_input(images, idx), cache=False)
        out[idx] = np.argmax(probs, axis=1)
    return out


def train(net: Network, images, labels, cfg: TrainConfig, val_images=None, val_labels=None,
          log=None):
    """SGD with momentum and weight decay; returns per-epoch metrics.

    Deterministic for a fixed config seed: the shuffle order and every
    reduction are fixed. Aborts with NumericError if the loss goes NaN.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise DataError("images/labels length mismatch")
    if len(labels) and labels.max() >= net.class_count:
        raise DataError("label out of range for network class count")
    rng = np.random.default_rng(cfg.seed)
    velocity = {}
    for layer in net.parameter_layers():
        for pname, param in layer.params().items():
            velocity[f"{layer.name}.{pname}"] = np.zeros_like(param)
    metrics = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total_loss = 0.0
        total_hits = 0
        for bi, idx in enumerate(_iter_batches(len(images), cfg.batch_size)):
            batch_idx = order[idx]
            x = _as_input(images, batch_idx)
            y = labels[batch_idx]
            loss, grads, probs = loss_and_grads(net, x, y)
            total_loss += loss * len(batch_idx)
            total_hits += int(np.sum(np.argmax(probs, axis=1) == y))
            for layer in net.parameter_layers():
                for pname, param in layer.params().items():
                    key = f"{layer.name}.{pname}"
                    g = grads[key]
                    if cfg.weight_decay and pname == "w":
                        g = g + cfg.weight_decay * param
                    v = velocity[key]
                    v *= cfg.momentum
                    v -= cfg.learning_rate * g
                    param += v
            if log is not None and bi % 100 == 0:
                log(f"epoch {epoch} batch {bi}: loss {loss:.4f}")
        row = {
            "epoch": epoch,
            "train_loss": total_loss / max(1, len(images)),
            "train_acc": total_hits / max(1, len(images)),
        }
        if val_images is not None:
            preds = predict(net, val_images, batch_size=cfg.batch_size)
            row["val_acc"] = float(np.mean(preds == np.asarray(val_labels)))
        metrics.append(row)
        if log is not None:
            log(f"epoch {epoch} done: " + ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
    return metrics


def metrics_csv(metrics) -> str:
    cols = ["epoch", "train_loss", "train_acc", "val_acc"]
    lines = [",".join(cols)]
    for row in metrics:
        lines.append(",".join("" if c not in row else (f"{row[c]}" if c == "epoch" else f"{row[c]:.6f}") for c in cols))
    return "\n".join(lines) + "\n"


# -- persistence -----------------------------------------------------------


def save_network(path, net: Network, run_config: dict | None = None) -> None:
    meta = {
        "class_count": net.class_count,
        "input_size": net.input_size,
        "arch": [],
    }
    tensors = {}
    for layer in net.layers:
        entry = {"name": layer.name, "kind": type(layer).__name__}
        if isinstance(layer, Conv2d):
            entry.update(c_in=layer.c_in, c_out=layer.c_out, k=layer.k, pad=layer.pad)
            tensors[f"{layer.name}.w"] = layer.w.astype(np.float32)
            tensors[f"{layer.name}.b"] = layer.b.astype(np.float32)
        meta["arch"].append(entry)
    tensors["__meta__"] = pack_json(meta)
    if run_config is not None:
        tensors["__run_config__"] = pack_json(run_config)
    write_container(path, tensors)


def load_network(path) -> Network:
    tensors = read_container(path)
    if "__meta__" not in tensors:
        raise DataError(f"{path}: missing network metadata")
    meta = unpack_json(tensors["__meta__"])
    layers = []
    for entry in meta["arch"]:
        kind, name = entry["kind"], entry["name"]
        if kind == "Conv2d":
            layer = Conv2d(name, entry["c_in"], entry["c_out"], entry["k"], entry["pad"])
            layer.w = tensors[f"{name}.w"].astype(np.float32)
            layer.b = tensors[f"{name}.b"].astype(np.float32)
        elif kind == "ReLU":
            layer = ReLU(name)
        elif kind == "MaxPool2":
            layer = MaxPool2(name)
        elif kind == "GlobalAvgPool":
            layer = GlobalAvgPool(name)
        elif kind == "Softmax":
            layer = Softmax(name)
        else:
            raise DataError(f"{path}: unknown layer kind {kind!r}")
        layers.append(layer)
    return Network(layers, meta["class_count"], meta.get("input_size", 84))
