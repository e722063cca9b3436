"""The settlement CNN: architecture description, forward/backward, SGD training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from . import tensor as T
from .errors import InputError, NumericError, ShapeError, SpecError
from .seeding import rng_for

log = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "relu", "pool", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    width: int = 0  # output channels (conv) or units (dense)
    kernel: int = 0
    padding: str = "same"
    in_units: int | None = None  # optional declared dense fan-in, checked against the stack


@dataclass
class ArchitectureSpec:
    layers: list[LayerSpec]
    input_size: int = 144
    num_classes: int = 2
    in_channels: int = 1
    init_std: float = 0.1  # used when TrainConfig.init_std is None

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]

    @property
    def conv_names(self) -> list[str]:
        return [l.name for l in self.layers if l.kind == "conv"]

    @property
    def dense_names(self) -> list[str]:
        return [l.name for l in self.layers if l.kind == "dense"]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise InputError(f"no layer named {name!r}; known: {[l.name for l in self.layers]}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Output shape of every layer for a single input patch; validates the spec."""
        if self.input_size < 1 or self.num_classes < 2 or self.in_channels < 1:
            raise SpecError("input_size, num_classes and in_channels must be positive (num_classes >= 2)")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise SpecError(f"duplicate layer names in {names}")
        shape: tuple[int, ...] = (self.in_channels, self.input_size, self.input_size)
        out = {}
        for l in self.layers:
            if l.kind not in LAYER_KINDS:
                raise SpecError(f"layer {l.name}: unknown kind {l.kind!r}")
            if l.kind == "conv":
                if len(shape) != 3:
                    raise SpecError(f"layer {l.name}: conv after a dense layer")
                if l.width < 1 or l.kernel < 1 or (l.padding == "same" and l.kernel % 2 == 0):
                    raise SpecError(f"layer {l.name}: bad width/kernel {l.width}/{l.kernel}")
                c, h, w = shape
                if l.padding == "valid":
                    h, w = h - l.kernel + 1, w - l.kernel + 1
                    if h < 1 or w < 1:
                        raise SpecError(f"layer {l.name}: kernel larger than its input")
                shape = (l.width, h, w)
            elif l.kind == "pool":
                if len(shape) != 3:
                    raise SpecError(f"layer {l.name}: pool after a dense layer")
                c, h, w = shape
                shape = (c, (h + 1) // 2, (w + 1) // 2)
            elif l.kind == "dense":
                fan_in = int(np.prod(shape))
                if l.in_units is not None and l.in_units != fan_in:
                    raise SpecError(
                        f"layer {l.name}: declared {l.in_units} inputs but the stack "
                        f"below flattens to {fan_in}"
                    )
                if l.width < 1:
                    raise SpecError(f"layer {l.name}: width must be positive")
                shape = (l.width,)
            out[l.name] = shape
        if len(shape) != 1 or shape[0] != self.num_classes:
            raise SpecError(f"final layer produces {shape}, expected ({self.num_classes},)")
        return out

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "init_std": self.init_std,
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            layers=[LayerSpec(**l) for l in d["layers"]],
            input_size=d["input_size"],
            num_classes=d["num_classes"],
            in_channels=d.get("in_channels", 1),
            init_std=d.get("init_std", 0.1),
        )


def make_spec(
    conv_widths: Iterable[int],
    kernels: Iterable[int],
    fc_width: int,
    input_size: int,
    num_classes: int = 2,
    init_std: float = 0.1,
) -> ArchitectureSpec:
    """Four conv layers with pools after the first three, then two dense layers."""
    layers: list[LayerSpec] = []
    widths, ks = list(conv_widths), list(kernels)
    for i, (w, k) in enumerate(zip(widths, ks), start=1):
        layers.append(LayerSpec("conv", f"conv{i}", width=w, kernel=k))
        layers.append(LayerSpec("relu", f"relu{i}"))
        if i < len(widths):
            layers.append(LayerSpec("pool", f"pool{i}"))
    layers += [
        LayerSpec("dense", "fcn1", width=fc_width),
        LayerSpec("relu", "relu_fcn1"),
        LayerSpec("dense", "fcn2", width=num_classes),
    ]
    return ArchitectureSpec(layers, input_size=input_size, num_classes=num_classes, init_std=init_std)


def default_spec(num_classes: int = 2, input_size: int = 144) -> ArchitectureSpec:
    return make_spec([32, 64, 96, 128], [5, 5, 3, 3], 512, input_size, num_classes, init_std=0.04)


def reduced_spec(num_classes: int = 2, input_size: int = 36) -> ArchitectureSpec:
    return make_spec([8, 16, 24, 32], [5, 5, 3, 3], 64, input_size, num_classes, init_std=0.1)


ARCHITECTURES = {"full": default_spec, "reduced": reduced_spec}


@dataclass
class TrainConfig:
    learning_rate: float = 0.00273
    batch_size: int = 150
    epochs: int = 10
    init_std: float | None = None  # None: the architecture's own init_std
    seed: int = 0
    shuffle: bool = True
    chunk_size: int = 50  # samples per forward/backward slice inside a mini-batch

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InputError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.chunk_size < 1:
            raise InputError("batch_size and chunk_size must be >= 1")
        if self.epochs < 0 or (self.init_std is not None and self.init_std < 0):
            raise InputError("epochs and init_std must be non-negative")


@dataclass
class ActivationStack:
    """Everything one forward pass exposes to downstream tasks.

    ``conv`` holds post-ReLU conv maps in network order, ``switches`` the
    pool switches keyed by pool layer, ``fcn1`` the post-ReLU penultimate
    vector and ``fcn2`` the logits.
    """

    conv: list[tuple[str, np.ndarray]]
    switches: dict[str, T.PoolSwitches]
    fcn1: np.ndarray
    fcn2: np.ndarray
    input_size: int

    def conv_map(self, layer_id: str) -> np.ndarray:
        for name, m in self.conv:
            if name == layer_id:
                return m
        raise InputError(f"layer {layer_id!r} not in stack; have {[n for n, _ in self.conv]}")

    @property
    def logits(self) -> np.ndarray:
        return self.fcn2


class PatchSet(NamedTuple):
    patches: np.ndarray  # [N, 1, S, S] float32
    labels: np.ndarray  # [N] int


class Network:
    """Architecture plus live float32 parameters keyed ``<layer>.weight`` / ``<layer>.bias``."""

    def __init__(self, spec: ArchitectureSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.shapes = spec.shapes()
        self.params = params
        self.metadata: dict = {}
        for name, shape in self.param_shapes().items():
            if name not in params or params[name].shape != shape:
                got = params[name].shape if name in params else None
                raise SpecError(f"parameter {name}: expected shape {shape}, got {got}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        prev: tuple[int, ...] = (self.spec.in_channels, self.spec.input_size, self.spec.input_size)
        for l in self.spec.layers:
            if l.kind == "conv":
                shapes[f"{l.name}.weight"] = (l.width, prev[0], l.kernel, l.kernel)
                shapes[f"{l.name}.bias"] = (l.width,)
            elif l.kind == "dense":
                shapes[f"{l.name}.weight"] = (l.width, int(np.prod(prev)))
                shapes[f"{l.name}.bias"] = (l.width,)
            prev = self.shapes[l.name]
        return shapes

    def conv_params(self, name: str) -> T.ConvParams:
        l = self.spec.layer(name)
        return T.ConvParams(self.params[f"{name}.weight"], self.params[f"{name}.bias"], l.padding)

    def dense_params(self, name: str) -> T.DenseParams:
        return T.DenseParams(self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _check_input(self, x: np.ndarray) -> None:
        s, c = self.spec.input_size, self.spec.in_channels
        if x.shape[-3:] != (c, s, s):
            raise ShapeError(f"network expects patches of shape {(c, s, s)}, got {x.shape[-3:]}")

    def forward_batch(self, x: np.ndarray, keep_cache: bool = False, stop_after: str | None = None):
        """Forward ``[N, C, S, S]``; returns ``(output, cache)``, cache None unless requested.

        ``stop_after`` names a layer whose output is returned instead of the logits.
        """
        self._check_input(x)
        x = np.asarray(x, dtype=np.float32)
        cache = [] if keep_cache else None
        for l in self.spec.layers:
            if l.kind == "conv":
                if keep_cache:
                    cache.append(x)
                x = T.conv2d_forward(x, self.conv_params(l.name))
            elif l.kind == "relu":
                x = T.relu(x)
                if keep_cache:
                    cache.append(x)  # output > 0 exactly where input > 0
            elif l.kind == "pool":
                x, sw = T.maxpool2x2_forward(x)
                if keep_cache:
                    cache.append(sw)
            else:
                if x.ndim > 2:
                    if keep_cache:
                        cache.append(x.shape)
                    x = x.reshape(x.shape[0], -1)
                elif keep_cache:
                    cache.append(None)
                if keep_cache:
                    cache.append(x)
                x = T.dense_forward(x, self.dense_params(l.name))
            if l.name == stop_after:
                break
        return x, cache

    def backward_batch(self, grad_logits: np.ndarray, cache: list) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        g = grad_logits
        cache = list(cache)
        for l in reversed(self.spec.layers):
            if l.kind == "conv":
                x = cache.pop()
                g, gw, gb = T.conv2d_backward(g, x, self.conv_params(l.name))
                grads[f"{l.name}.weight"], grads[f"{l.name}.bias"] = gw, gb
            elif l.kind == "relu":
                g = T.relu_backward(g, cache.pop())
            elif l.kind == "pool":
                g = T.maxpool2x2_backward(g, cache.pop())
            else:
                x = cache.pop()
                flat_shape = cache.pop()
                g, gw, gb = T.dense_backward(g, x, self.dense_params(l.name))
                grads[f"{l.name}.weight"], grads[f"{l.name}.bias"] = gw, gb
                if flat_shape is not None:
                    g = g.reshape(flat_shape)
        return grads

    def capture(self, patch: np.ndarray) -> tuple[np.ndarray, ActivationStack]:
        self._check_input(patch)
        x = np.asarray(patch, dtype=np.float32)
        conv_maps: list[tuple[str, np.ndarray]] = []
        switches: dict[str, T.PoolSwitches] = {}
        penultimate = self.spec.dense_names[-2] if len(self.spec.dense_names) > 1 else None
        previous: LayerSpec | None = None
        fcn1 = None
        for l in self.spec.layers:
            if l.kind == "conv":
                x = T.conv2d_forward(x, self.conv_params(l.name))
            elif l.kind == "relu":
                x = T.relu(x)
                if previous is not None and previous.kind == "conv":
                    conv_maps.append((previous.name, x))
                elif previous is not None and previous.name == penultimate:
                    fcn1 = x
            elif l.kind == "pool":
                x, switches[l.name] = T.maxpool2x2_forward(x)
            else:
                x = T.dense_forward(x.reshape(-1), self.dense_params(l.name))
                if l.name == penultimate:
                    fcn1 = x  # replaced by the post-ReLU vector when a ReLU follows
            previous = l
        return x, ActivationStack(conv_maps, switches, fcn1, x, self.spec.input_size)

    @property
    def feature_layer(self) -> str:
        """Layer whose output is the fcn1 feature vector (the ReLU after the penultimate dense)."""
        names = [l.name for l in self.spec.layers]
        i = names.index(self.spec.dense_names[-2])
        if i + 1 < len(names) and self.spec.layers[i + 1].kind == "relu":
            return names[i + 1]
        return names[i]

    def predict_logits(self, patches: np.ndarray, chunk: int = 64) -> np.ndarray:
        out = [self.forward_batch(patches[i : i + chunk])[0] for i in range(0, len(patches), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.spec.num_classes), np.float32)


def build_network(spec: ArchitectureSpec, cfg: TrainConfig | None = None) -> Network:
    cfg = cfg or TrainConfig()
    spec.shapes()
    std = spec.init_std if cfg.init_std is None else cfg.init_std
    rng = rng_for(cfg.seed, "settlement-net/init")
    params = {}
    probe = Network.__new__(Network)
    probe.spec, probe.shapes = spec, spec.shapes()
    for name, shape in probe.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, np.float32)
        else:
            params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return Network(spec, params)


def forward(net: Network, patch: np.ndarray, capture: bool = False):
    """Logits for one ``[1, S, S]`` patch, plus the activation stack when ``capture``."""
    if capture:
        return net.capture(patch)
    logits, _ = net.forward_batch(np.asarray(patch)[None])
    return logits[0], None


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def to_text(self) -> str:
        lines = ["epoch\tloss\tval_acc"]
        lines += [f"{e.epoch}\t{e.train_loss:.6f}\t{e.val_accuracy:.4f}" for e in self.epochs]
        return "\n".join(lines) + "\n"


def _batch_gradients(net: Network, x: np.ndarray, y: np.ndarray, chunk: int):
    """Summed per-sample loss and gradients over one mini-batch, in fixed chunk order."""
    total_loss = 0.0
    grads: dict[str, np.ndarray] | None = None
    for i in range(0, len(x), chunk):
        logits, cache = net.forward_batch(x[i : i + chunk], keep_cache=True)
        loss, _, g = T.softmax_xent(logits, y[i : i + chunk])
        total_loss += float(np.sum(loss, dtype=np.float64))
        part = net.backward_batch(g, cache)
        if grads is None:
            grads = part
        else:
            for k in grads:
                grads[k] += part[k]
    return total_loss, grads


def train(net: Network, train_set: PatchSet, val_set: PatchSet, cfg: TrainConfig) -> TrainReport:
    """Mini-batch SGD on mean cross-entropy; one report row per epoch."""
    x_tr, y_tr = train_set
    if len(x_tr) == 0 or len(val_set[0]) == 0:
        raise InputError("training and validation sets must be non-empty")
    y_tr = np.asarray(y_tr, dtype=np.int64)
    if y_tr.min() < 0 or y_tr.max() >= net.spec.num_classes:
        raise InputError(f"labels must lie in [0, {net.spec.num_classes})")
    rng = rng_for(cfg.seed, "settlement-net/shuffle")
    n = len(x_tr)
    report = TrainReport()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        epoch_loss = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            loss_sum, grads = _batch_gradients(net, x_tr[idx], y_tr[idx], cfg.chunk_size)
            if not np.isfinite(loss_sum):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            scale = np.float32(1.0 / len(idx))
            for k in grads:
                grads[k] *= scale
            try:
                T.sgd_step(net.params, grads, cfg.learning_rate)
            except NumericError as e:
                raise NumericError(f"epoch {epoch}, batch {b}: {e}") from e
            epoch_loss += loss_sum
        acc = evaluate(net, val_set)
        stats = EpochStats(epoch, epoch_loss / n, acc)
        log.info("epoch %d loss %.6f val_acc %.4f", epoch, stats.train_loss, acc)
        report.epochs.append(stats)
    net.metadata = {
        "epochs_run": len(report.epochs),
        "train_losses": report.losses,
        "val_accuracy": [e.val_accuracy for e in report.epochs],
        "seed": cfg.seed,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
    }
    return report


def evaluate(net: Network, dataset: PatchSet) -> float:
    x, y = dataset
    if len(x) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    pred = net.predict_logits(x).argmax(axis=1)  # argmax keeps the lowest index on ties
    return float(np.mean(pred == np.asarray(y)))
