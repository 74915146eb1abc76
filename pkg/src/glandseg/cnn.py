"""A small numpy CNN engine for center-pixel patch classification.

Networks are plain sequences of layers (valid stride-1 convolutions, 2x2
max-pooling, ReLU, fully connected, dropout, softmax).  Parameters live in a
dict keyed ``"<layer index>.W"`` / ``"<layer index>.b"``; tensors are NCHW.
"""
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import fmap_bytes, fmap_from_bytes

__all__ = [
    "LayerSpec",
    "NetworkSpec",
    "TrainerConfig",
    "PatchSet",
    "TrainingDiverged",
    "conv",
    "maxpool",
    "relu",
    "fc",
    "dropout",
    "softmax",
    "object_net_spec",
    "separator_net_spec",
    "tiny_object_net_spec",
    "tiny_separator_net_spec",
    "init_params",
    "forward",
    "backward",
    "nll_loss",
    "learning_rate",
    "momentum",
    "mbsgd_step",
    "train",
    "predict_proba",
    "predict_map",
    "extract_patches",
    "save_checkpoint",
    "load_checkpoint",
]

LAYER_KINDS = ("conv", "maxpool", "relu", "fully_connected", "dropout", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 0
    pool: int = 0
    units: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.filters < 1 or self.kernel < 1):
            raise ValueError("conv layers need filters >= 1 and a square kernel >= 1")
        if self.kind == "maxpool" and self.pool != 2:
            raise ValueError("only 2x2 max-pooling is supported")
        if self.kind == "fully_connected" and self.units < 1:
            raise ValueError("fully connected layers need units >= 1")
        if self.kind == "dropout" and not 0 <= self.rate < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")


def conv(filters, kernel):
    return LayerSpec("conv", filters=filters, kernel=kernel)


def maxpool():
    return LayerSpec("maxpool", pool=2)


def relu():
    return LayerSpec("relu")


def fc(units):
    return LayerSpec("fully_connected", units=units)


def dropout(rate=0.5):
    return LayerSpec("dropout", rate=rate)


def softmax():
    return LayerSpec("softmax")


@dataclass(frozen=True)
class NetworkSpec:
    """Layer sequence plus input geometry; shapes are checked on construction."""

    name: str
    layers: tuple
    input_size: int
    n_classes: int
    in_channels: int = 1
    shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shapes", tuple(self._chain()))
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ValueError(f"{self.name}: last layer must be softmax")
        if self.shapes[-1] != (self.n_classes,):
            raise ValueError(
                f"{self.name}: network emits {self.shapes[-1]}, expected {self.n_classes} classes")

    def _chain(self):
        shape = (self.in_channels, self.input_size, self.input_size)
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind in ("conv", "maxpool") and len(shape) != 3:
                raise ValueError(f"{self.name}: layer {i} ({layer.kind}) after flattening")
            if layer.kind == "conv":
                c, h, w = shape
                if layer.kernel > h or layer.kernel > w:
                    raise ValueError(
                        f"{self.name}: layer {i} kernel {layer.kernel} exceeds input {h}x{w}")
                shape = (layer.filters, h - layer.kernel + 1, w - layer.kernel + 1)
            elif layer.kind == "maxpool":
                c, h, w = shape
                if h < 2 or w < 2:
                    raise ValueError(f"{self.name}: layer {i} pools a {h}x{w} map")
                shape = (c, h // 2, w // 2)
            elif layer.kind == "fully_connected":
                shape = (layer.units,)
            out.append(shape)
        return out

    def spatial_chain(self):
        """Side lengths of the input and of every conv/pool output."""
        sizes = [self.input_size]
        for layer, shape in zip(self.layers, self.shapes):
            if layer.kind in ("conv", "maxpool"):
                sizes.append(shape[1])
        return sizes

    def flatten_size(self):
        """Number of features entering the first fully connected layer."""
        for i, layer in enumerate(self.layers):
            if layer.kind == "fully_connected":
                prev = self.shapes[i - 1] if i else (self.in_channels, self.input_size, self.input_size)
                return int(np.prod(prev))
        raise ValueError(f"{self.name} has no fully connected layer")

    def param_shapes(self):
        shapes = {}
        prev = (self.in_channels, self.input_size, self.input_size)
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                shapes[f"{i}.W"] = (layer.filters, prev[0], layer.kernel, layer.kernel)
                shapes[f"{i}.b"] = (layer.filters,)
            elif layer.kind == "fully_connected":
                shapes[f"{i}.W"] = (int(np.prod(prev)), layer.units)
                shapes[f"{i}.b"] = (layer.units,)
            prev = self.shapes[i]
        return shapes

    def n_params(self):
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def to_json(self):
        return json.dumps({
            "name": self.name,
            "input_size": self.input_size,
            "n_classes": self.n_classes,
            "in_channels": self.in_channels,
            "layers": [asdict(l) for l in self.layers],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["name"], tuple(LayerSpec(**l) for l in d["layers"]),
                   d["input_size"], d["n_classes"], d.get("in_channels", 1))


def _build(name, filters, kernels, units, n_classes, input_size, rate=0.5):
    layers = []
    for k, (f, ks) in enumerate(zip(filters, kernels)):
        layers += [conv(f, ks), relu()]
        if k < 3:
            layers.append(maxpool())
    for u in units:
        layers += [fc(u), relu(), dropout(rate)]
    layers += [fc(n_classes), softmax()]
    return NetworkSpec(name, tuple(layers), input_size, n_classes)


def object_net_spec():
    """Four-class gland/background x benign/malignant classifier, 101x101 input."""
    return _build("object-net", (80, 96, 128, 160), (11, 7, 5, 3), (1024, 512), 4, 101)


def separator_net_spec():
    """Binary gland-separator classifier, 101x101 input."""
    return _build("separator-net", (64, 96, 128, 160), (9, 7, 5, 3), (1024, 512), 2, 101)


def tiny_object_net_spec():
    """Desk-scale object net: same layer pattern, 1/8 widths, 33x33 input.

    Kernel sizes shrink so four valid convolutions and three poolings still
    fit in 33 pixels (33 -> 30 -> 15 -> 12 -> 6 -> 4 -> 2 -> 1).
    """
    return _build("tiny-object-net", (10, 12, 16, 20), (4, 4, 3, 2), (128, 64), 4, 33)


def tiny_separator_net_spec():
    """Desk-scale separator net (33 -> 28 -> 14 -> 12 -> 6 -> 4 -> 2 -> 1)."""
    return _build("tiny-separator-net", (8, 12, 16, 20), (6, 3, 3, 2), (128, 64), 2, 33)


def init_params(spec, rng, dtype=np.float32):
    """Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases."""
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            f, c, k, _ = shape
            fan_in, fan_out = c * k * k, f * k * k
        else:
            fan_in, fan_out = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def _conv_forward(x, w, b):
    k = w.shape[2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # N C Ho Wo k k
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N Ho Wo F
    y += b
    return y.transpose(0, 3, 1, 2)


def _conv_backward(x, w, dy, need_dx):
    k = w.shape[2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # F C k k
    db = dy.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        pad = k - 1
        dyp = np.pad(dy, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dwin = sliding_window_view(dyp, (k, k), axis=(2, 3))  # N F H W k k
        dx = np.tensordot(dwin, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
        dx = dx.transpose(0, 3, 1, 2)
    return dw, db, dx


def _pool_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, arg


def _pool_backward(dy, arg, in_shape):
    n, c, h, w = in_shape
    h2, w2 = h // 2, w // 2
    blocks = np.zeros((n, c, h2, w2, 4), dtype=dy.dtype)
    np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
    blocks = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, :, :2 * h2, :2 * w2] = blocks.reshape(n, c, 2 * h2, 2 * w2)
    return dx


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(spec, params, batch, training=False, rng=None):
    """Run ``batch`` (N, C, S, S) through the network.

    Returns the (N, L) class distributions and a cache for :func:`backward`.
    Dropout masks are drawn from ``rng`` only when ``training`` is set.
    """
    x = np.asarray(batch)
    expect = (spec.in_channels, spec.input_size, spec.input_size)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise ValueError(f"{spec.name}: batch shape {x.shape} does not match input {expect}")
    if training and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")
    cache = []
    for i, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "conv":
            cache.append(x)
            x = _conv_forward(x, params[f"{i}.W"], params[f"{i}.b"])
        elif kind == "maxpool":
            y, arg = _pool_forward(x)
            cache.append((arg, x.shape))
            x = y
        elif kind == "relu":
            mask = x > 0
            cache.append(mask)
            x = x * mask
        elif kind == "fully_connected":
            x = x.reshape(len(x), -1)
            cache.append(x)
            x = x @ params[f"{i}.W"] + params[f"{i}.b"]
        elif kind == "dropout":
            if training and layer.rate > 0:
                keep = (rng.random(x.shape) >= layer.rate).astype(x.dtype) / (1 - layer.rate)
                cache.append(keep)
                x = x * keep
            else:
                cache.append(None)
        elif kind == "softmax":
            cache.append(None)
            x = _softmax(x)
    return x, {"layers": cache, "probs": x, "training": training}


def nll_loss(probs, targets):
    """Mean negative log-likelihood of integer ``targets``."""
    p = probs[np.arange(len(targets)), targets]
    return float(-np.mean(np.log(np.maximum(p, np.finfo(probs.dtype).tiny))))


def backward(spec, params, cache, targets):
    """Gradients of the mean NLL loss with respect to every parameter.

    Returns ``(loss, grads)`` where ``grads`` mirrors the keys of ``params``.
    """
    if cache is None or "layers" not in cache:
        raise ValueError("backward needs the cache from a forward pass")
    targets = np.asarray(targets)
    probs = cache["probs"]
    n = len(targets)
    loss = nll_loss(probs, targets)
    d = probs.copy()
    d[np.arange(n), targets] -= 1
    d /= n
    grads = {}
    first_param = min(i for i, l in enumerate(spec.layers) if l.kind in ("conv", "fully_connected"))
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, c = spec.layers[i], cache["layers"][i]
        kind = layer.kind
        if kind == "softmax":
            continue  # folded into the NLL gradient above
        if kind == "dropout":
            if c is not None:
                d = d * c
        elif kind == "relu":
            d = d * c
        elif kind == "maxpool":
            arg, shape = c
            d = _pool_backward(d, arg, shape)
        elif kind == "fully_connected":
            grads[f"{i}.W"] = c.T @ d
            grads[f"{i}.b"] = d.sum(axis=0)
            d = d @ params[f"{i}.W"].T
            prev = spec.shapes[i - 1] if i else (spec.in_channels, spec.input_size, spec.input_size)
            d = d.reshape((n,) + tuple(prev))
        elif kind == "conv":
            dw, db, dx = _conv_backward(c, params[f"{i}.W"], d, need_dx=i > first_param)
            grads[f"{i}.W"], grads[f"{i}.b"] = dw, db
            d = dx
    return loss, grads


@dataclass
class TrainerConfig:
    minibatch_size: int = 200
    eta0: float = 0.0025
    lr_floor_fraction: float = 0.2
    lr_saturation_epoch: int = 100
    weight_decay: float = 0.005
    dropout_rate: float = 0.5
    momentum_start: float = 0.8
    momentum_end: float = 0.99
    momentum_saturation_epoch: int = 50
    patience_epochs: int = 20
    max_epochs: int = 500
    train_error_subset: int = 20000
    rng_seed: int = 0

    def __post_init__(self):
        if self.minibatch_size < 1 or self.eta0 <= 0 or self.lr_floor_fraction <= 0:
            raise ValueError("minibatch size and learning rates must be positive")
        if self.weight_decay < 0 or not 0 <= self.dropout_rate < 1:
            raise ValueError("weight decay must be >= 0 and dropout rate in [0, 1)")
        if not (0 <= self.momentum_start < 1 and 0 <= self.momentum_end < 1):
            raise ValueError("momentum must lie in [0, 1)")
        if self.patience_epochs < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")


def learning_rate(epoch, config):
    """Linear decay from eta0 to ``lr_floor_fraction * eta0``, flat afterwards."""
    t = min(epoch, config.lr_saturation_epoch) / config.lr_saturation_epoch
    # endpoint-weighted form hits both anchors exactly
    return (1.0 - t) * config.eta0 + t * (config.eta0 * config.lr_floor_fraction)


def momentum(epoch, config):
    t = min(epoch, config.momentum_saturation_epoch) / config.momentum_saturation_epoch
    return (1.0 - t) * config.momentum_start + t * config.momentum_end


def mbsgd_step(params, grads, velocity, epoch, config):
    """One momentum SGD update with weight decay, in place.

    ``v <- m(epoch) * v - lr(epoch) * (grad + weight_decay * param)``,
    then ``param <- param + v``.
    """
    lr, m = learning_rate(epoch, config), momentum(epoch, config)
    for name, p in params.items():
        v = velocity[name]
        v *= m
        v -= lr * (grads[name] + config.weight_decay * p)
        p += v
    return params


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PatchSet:
    """Labelled patches with a train/held-out split and per-patch provenance.

    ``provenance`` rows are ``(image index, row, col, rotation index)``.
    """

    patches: np.ndarray
    labels: np.ndarray
    heldout: np.ndarray
    provenance: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, mask):
        return PatchSet(self.patches[mask], self.labels[mask], self.heldout[mask],
                        self.provenance[mask])


def _with_dropout(spec, rate):
    layers = tuple(LayerSpec("dropout", rate=rate) if l.kind == "dropout" else l for l in spec.layers)
    return NetworkSpec(spec.name, layers, spec.input_size, spec.n_classes, spec.in_channels)


def predict_proba(spec, params, patches, batch_size=512):
    out = [forward(spec, params, patches[s:s + batch_size])[0]
           for s in range(0, len(patches), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, spec.n_classes))


def _error_rate(spec, params, patches, labels):
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict_proba(spec, params, patches).argmax(axis=1) != labels))


def train(spec, dataset, config, log=None):
    """Minibatch SGD with early stopping on held-out error.

    Returns the parameters from the epoch with the lowest held-out error and
    the per-epoch curve (list of dicts with ``epoch``, ``loss``,
    ``train_error``, ``heldout_error``).  Stops once ``patience_epochs``
    consecutive epochs bring no improvement, or at ``max_epochs``.
    """
    if len(dataset) == 0:
        raise ValueError("empty patch set")
    tr = np.flatnonzero(~dataset.heldout)
    ho = np.flatnonzero(dataset.heldout)
    if len(tr) == 0 or len(ho) == 0:
        raise ValueError("need both training and held-out patches")
    rng = np.random.default_rng(config.rng_seed)
    spec = _with_dropout(spec, config.dropout_rate)
    params = init_params(spec, rng, dtype=dataset.patches.dtype)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    X, y = dataset.patches, dataset.labels
    sub = tr if len(tr) <= config.train_error_subset else np.sort(
        rng.choice(tr, config.train_error_subset, replace=False))
    Xho, yho, Xsub, ysub = X[ho], y[ho], X[sub], y[sub]

    best_err, best_epoch, best = np.inf, -1, None
    curve = []
    for epoch in range(config.max_epochs):
        order = rng.permutation(tr)
        losses = []
        for s in range(0, len(order), config.minibatch_size):
            idx = order[s:s + config.minibatch_size]
            probs, cache = forward(spec, params, X[idx], training=True, rng=rng)
            loss, grads = backward(spec, params, cache, y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{spec.name}: non-finite loss in epoch {epoch}")
            mbsgd_step(params, grads, velocity, epoch, config)
            losses.append(loss)
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_error": _error_rate(spec, params, Xsub, ysub),
            "heldout_error": _error_rate(spec, params, Xho, yho),
        }
        curve.append(row)
        if log is not None:
            log(row)
        if row["heldout_error"] < best_err:
            best_err, best_epoch = row["heldout_error"], epoch
            best = {k: v.copy() for k, v in params.items()}
        elif epoch - best_epoch >= config.patience_epochs:
            break
    return best, curve


def extract_patches(image, size, coords=None):
    """Mirror-padded ``size x size`` patches centred on pixels of ``image``.

    ``coords`` is an (N, 2) array of (row, col); all pixels when omitted.
    Returns an (N, 1, size, size) array.
    """
    img = np.asarray(image)
    half = size // 2
    padded = np.pad(img, half, mode="reflect")
    win = sliding_window_view(padded, (size, size))
    if coords is None:
        out = win.reshape(-1, size, size)
    else:
        coords = np.asarray(coords)
        out = win[coords[:, 0], coords[:, 1]]
    return np.ascontiguousarray(out)[:, None]


def predict_map(spec, params, image, batch_size=512):
    """Classify every pixel from the patch centred on it.

    Returns an (H, W, L) array of per-pixel class distributions.
    """
    img = np.asarray(image, dtype=next(iter(params.values())).dtype)
    h, w = img.shape
    half = spec.input_size // 2
    padded = np.pad(img, half, mode="reflect")
    win = sliding_window_view(padded, (spec.input_size, spec.input_size)).reshape(
        h * w, spec.input_size, spec.input_size)
    out = np.empty((h * w, spec.n_classes), dtype=img.dtype)
    for s in range(0, h * w, batch_size):
        batch = np.ascontiguousarray(win[s:s + batch_size])[:, None]
        out[s:s + batch_size] = forward(spec, params, batch)[0]
    return out.reshape(h, w, spec.n_classes)


CHECKPOINT_MAGIC = b"GSCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, spec, params, meta=None):
    """Write spec (JSON text) followed by FMAP-encoded float32 tensors.

    Layout: magic, uint32 version, uint32 header length, UTF-8 JSON header
    (spec, tensor names and shapes, optional meta), then one FMAP blob per
    tensor in header order.
    """
    names = sorted(params, key=lambda k: (int(k.split(".")[0]), k))
    header = json.dumps({
        "spec": json.loads(spec.to_json()),
        "tensors": [[n, list(params[n].shape)] for n in names],
        "meta": meta or {},
    }, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    for n in names:
        t = np.asarray(params[n], dtype=np.float32)
        parts.append(fmap_bytes(t.reshape(-1, t.shape[-1])))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(spec, params, meta)``."""
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", buf, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    spec = NetworkSpec.from_json(json.dumps(header["spec"]))
    params = {}
    for name, shape in header["tensors"]:
        arr, used = fmap_from_bytes(buf[off:], source=str(path))
        off += used
        params[name] = arr.reshape(shape)
    return spec, params, header["meta"]
