"""Model repository: procedural shape dataset, small classifiers, training.

The dataset is generated, not downloaded: five shape families (bars,
disks, crosses, rings, checkers) drawn with randomized position, scale
and color over a dark background, plus uniform pixel noise.  Everything
below is a pure function of its seeds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from zlib import crc32

import numpy as np

from . import fileio, numerics as nm
from .errors import ConfigError, TrainingError
from .numerics import GradTape, Tensor, backward
from .rng import Rng

SHAPE_FAMILIES = ("bars", "disks", "crosses", "rings", "checkers")


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 20260810
    n_classes: int = 5
    samples_per_class: int = 200
    image_size: int = 32
    noise_level: float = 0.15

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError(f"noise_level must be in [0, 1], got {self.noise_level}")
        if self.samples_per_class < 1:
            raise ConfigError(f"samples_per_class must be >= 1, got {self.samples_per_class}")


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, s, s) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    spec: DatasetSpec

    @property
    def train_indices(self):
        return np.arange(len(self.labels))[np.arange(len(self.labels)) % 5 != 0]

    @property
    def val_indices(self):
        return np.arange(0, len(self.labels), 5)

    def split(self):
        tr, va = self.train_indices, self.val_indices
        return (self.images[tr], self.labels[tr]), (self.images[va], self.labels[va])

    def checksum(self) -> int:
        return crc32(self.images.tobytes() + self.labels.tobytes())


def render_shape(canvas: np.ndarray, class_id: int, rng: Rng) -> None:
    """Draw one colored shape instance in place on a (3, s, s) canvas."""
    s = canvas.shape[1]
    family = SHAPE_FAMILIES[class_id % len(SHAPE_FAMILIES)]
    color = rng.uniform((3,), 0.55, 0.95)
    yy, xx = np.mgrid[0:s, 0:s]
    cy = rng.uniform(None, 0.38, 0.62) * s
    cx = rng.uniform(None, 0.38, 0.62) * s

    if family == "bars":
        period = int(rng.uniform(None, 0.16, 0.30) * s)
        phase = rng.randint(period)
        mask = ((yy + phase) % period) < (period // 2)
    elif family == "disks":
        r = rng.uniform(None, 0.22, 0.34) * s
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif family == "crosses":
        arm = rng.uniform(None, 0.26, 0.40) * s
        thick = rng.uniform(None, 0.05, 0.09) * s
        horiz = (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= arm)
        vert = (np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= arm)
        mask = horiz | vert
    elif family == "rings":
        r_out = rng.uniform(None, 0.26, 0.38) * s
        thick = rng.uniform(None, 0.06, 0.11) * s
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (d2 <= r_out * r_out) & (d2 >= (r_out - thick) ** 2)
    else:  # checkers
        cell = max(2, int(rng.uniform(None, 0.10, 0.20) * s))
        py, px = rng.randint(cell), rng.randint(cell)
        mask = (((yy + py) // cell) + ((xx + px) // cell)) % 2 == 0

    if class_id >= len(SHAPE_FAMILIES):
        mask = mask.T  # repeated families get the transposed variant
    canvas[:, mask] = color[:, None]


def generate_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    s = spec.image_size
    n = spec.n_classes * spec.samples_per_class
    images = np.empty((n, 3, s, s), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    root = Rng(spec.seed)
    for i in range(n):
        label = i // spec.samples_per_class
        rng = root.derive("sample", i)
        background = rng.uniform((3,), 0.05, 0.25)
        canvas = np.broadcast_to(background[:, None, None], (3, s, s)).astype(np.float64).copy()
        render_shape(canvas, label, rng)
        if spec.noise_level > 0:
            canvas += spec.noise_level * (rng.uniform((3, s, s)) - 0.5)
        images[i] = np.clip(canvas, 0.0, 1.0)
        labels[i] = label
    return Dataset(images=images, labels=labels, spec=spec)


def export_dataset_ppm(dataset: Dataset, out_dir) -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        name = f"img_{i:05d}.ppm"
        fileio.write_ppm(out / name, img)
        rows.append((name, int(label)))
    fileio.write_csv(out / "labels.csv", ["filename", "label"], rows)


# ---------------------------------------------------------------------------
# architectures


@dataclass(frozen=True)
class ArchDescriptor:
    name: str
    layers: tuple  # tuples: ("conv", out, k, stride, pad) ("dense", out) ("relu",) ("maxpool", k) ("avgpool", k) ("flatten",)
    n_classes: int = 5
    in_channels: int = 3
    input_size: int = 32

    def weight_shapes(self):
        shapes = []
        c, hw = self.in_channels, self.input_size
        feat = None
        for layer in self.layers:
            kind = layer[0]
            if kind == "conv":
                out_ch, k, stride, pad = layer[1:]
                shapes.append((out_ch, c, k, k))
                shapes.append((out_ch,))
                hw = (hw + 2 * pad - k) // stride + 1
                c = out_ch
            elif kind in ("maxpool", "avgpool"):
                hw //= layer[1]
            elif kind == "flatten":
                feat = c * hw * hw
            elif kind == "dense":
                out_f = layer[1]
                if feat is None:
                    raise ConfigError(f"{self.name}: dense before flatten")
                shapes.append((feat, out_f))
                shapes.append((out_f,))
                feat = out_f
            elif kind != "relu":
                raise ConfigError(f"{self.name}: unknown layer kind {kind!r}")
        if feat != self.n_classes:
            raise ConfigError(f"{self.name}: final layer emits {feat}, expected {self.n_classes} logits")
        return shapes

    @property
    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.weight_shapes()))

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "layers": [list(layer) for layer in self.layers],
            "n_classes": self.n_classes,
            "in_channels": self.in_channels,
            "input_size": self.input_size,
        }

    @staticmethod
    def from_json(d: dict) -> "ArchDescriptor":
        return ArchDescriptor(
            name=d["name"],
            layers=tuple(tuple(layer) for layer in d["layers"]),
            n_classes=d["n_classes"],
            in_channels=d["in_channels"],
            input_size=d["input_size"],
        )


def default_architectures(n_classes: int = 5, input_size: int = 32):
    """Six architectures over four families; pairwise distinct parameter counts."""
    mk = lambda name, layers: ArchDescriptor(name, tuple(layers), n_classes, 3, input_size)
    return [
        mk("conv3x3", [("conv", 8, 3, 1, 1), ("relu",), ("maxpool", 2),
                       ("conv", 16, 3, 1, 1), ("relu",), ("maxpool", 2),
                       ("flatten",), ("dense", n_classes)]),
        mk("conv5x5", [("conv", 8, 5, 1, 2), ("relu",), ("maxpool", 2),
                       ("conv", 16, 5, 1, 2), ("relu",), ("maxpool", 2),
                       ("flatten",), ("dense", n_classes)]),
        mk("strided", [("conv", 12, 3, 2, 1), ("relu",),
                       ("conv", 24, 3, 2, 1), ("relu",),
                       ("flatten",), ("dense", n_classes)]),
        mk("avgpool", [("conv", 10, 3, 1, 1), ("relu",), ("avgpool", 2),
                       ("conv", 20, 3, 1, 1), ("relu",), ("avgpool", 4),
                       ("flatten",), ("dense", n_classes)]),
        mk("dense_deep", [("flatten",), ("dense", 64), ("relu",),
                          ("dense", 64), ("relu",), ("dense", n_classes)]),
        mk("dense_wide", [("flatten",), ("dense", 256), ("relu",), ("dense", n_classes)]),
    ]


def init_weights(arch: ArchDescriptor, rng: Rng):
    weights = []
    for shape in arch.weight_shapes():
        if len(shape) == 1:
            weights.append(np.zeros(shape, dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = np.sqrt(2.0 / fan_in)
            weights.append((rng.normal(shape) * std).astype(np.float32))
    return weights


def forward_raw(arch: ArchDescriptor, weights, x: np.ndarray, upto: int | None = None) -> np.ndarray:
    """Inference pass on raw arrays; upto stops after that many layers (feature taps)."""
    h = x
    wi = 0
    for li, layer in enumerate(arch.layers):
        if upto is not None and li >= upto:
            break
        kind = layer[0]
        if kind == "conv":
            _, k, stride, pad = layer[1:]
            h = nm.conv2d_raw(h, weights[wi], stride, pad) + weights[wi + 1][None, :, None, None]
            wi += 2
        elif kind == "relu":
            h = nm.relu_raw(h)
        elif kind == "maxpool":
            h = nm.maxpool_raw(h, layer[1])
        elif kind == "avgpool":
            h = nm.avgpool_raw(h, layer[1])
        elif kind == "flatten":
            h = h.reshape(h.shape[0], -1)
        elif kind == "dense":
            h = nm.dense_raw(h, weights[wi], weights[wi + 1])
            wi += 2
    return h


def forward_tensor(arch: ArchDescriptor, weight_tensors, x: Tensor, tape: GradTape) -> Tensor:
    """Differentiable pass used for training and attack gradients."""
    h = x
    wi = 0
    for layer in arch.layers:
        kind = layer[0]
        if kind == "conv":
            _, k, stride, pad = layer[1:]
            h = nm.conv2d_forward(h, weight_tensors[wi], stride, pad, tape)
            h = nm.bias_add_channels(h, weight_tensors[wi + 1], tape)
            wi += 2
        elif kind == "relu":
            h = nm.relu(h, tape)
        elif kind == "maxpool":
            h = nm.maxpool2d(h, layer[1], tape)
        elif kind == "avgpool":
            h = nm.avgpool2d(h, layer[1], tape)
        elif kind == "flatten":
            h = nm.flatten(h, tape)
        elif kind == "dense":
            h = nm.dense_forward(h, weight_tensors[wi], weight_tensors[wi + 1], tape)
            wi += 2
    return h


@dataclass
class ModelRecord:
    arch: ArchDescriptor
    weights: list
    train_seed: int
    clean_accuracy: float = 0.0

    @property
    def name(self) -> str:
        return self.arch.name

    def logits(self, x: np.ndarray) -> np.ndarray:
        return forward_raw(self.arch, self.weights, x)

    def probs(self, x: np.ndarray) -> np.ndarray:
        return nm.softmax_raw(self.logits(x))

    def features(self, x: np.ndarray, upto: int) -> np.ndarray:
        return forward_raw(self.arch, self.weights, x, upto=upto)

    def weights_checksum(self) -> int:
        return crc32(b"".join(np.ascontiguousarray(w, dtype="<f4").tobytes() for w in self.weights))

    def conv_feature_layer(self) -> int:
        """Layer index just past the last relu before flatten: the tracker's feature tap."""
        last = None
        for li, layer in enumerate(self.arch.layers):
            if layer[0] == "flatten":
                break
            if layer[0] == "relu":
                last = li
        if last is None:
            raise ConfigError(f"{self.name}: no convolutional feature layer")
        return last + 1


def train_model(arch: ArchDescriptor, dataset: Dataset, train_seed: int, epochs: int = 15,
                learning_rate: float = 0.05, batch_size: int = 32) -> ModelRecord:
    """Plain minibatch SGD with a fixed schedule; deterministic per inputs."""
    (train_x, train_y), (val_x, val_y) = dataset.split()
    if len(train_y) == 0:
        raise ConfigError("training split is empty")
    rng = Rng(train_seed)
    weights = init_weights(arch, rng.derive("init"))
    n = len(train_y)
    for epoch in range(epochs):
        order = rng.derive("epoch", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            tape = GradTape()
            wt = [Tensor(w, requires_grad=True) for w in weights]
            xb = Tensor(train_x[idx])
            logits = forward_tensor(arch, wt, xb, tape)
            loss = nm.cross_entropy(nm.softmax(logits, tape), train_y[idx], tape)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"{arch.name}: loss became non-finite in epoch {epoch}", epoch=epoch)
            grads = backward(loss, tape)
            weights = [w.data - learning_rate * grads[w] for w in wt]
    record = ModelRecord(arch=arch, weights=weights, train_seed=train_seed)
    record.clean_accuracy = evaluate_accuracy(record, val_x, val_y)
    return record


def evaluate_accuracy(record: ModelRecord, images: np.ndarray, labels) -> float:
    """Fraction of argmax-correct predictions; argmax ties go to the lowest class."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        warnings.warn("evaluate_accuracy called on an empty set; returning 0.0")
        return 0.0
    pred = np.argmax(record.logits(images), axis=1)
    return float(np.mean(pred == labels))


def save_model(record: ModelRecord, path) -> None:
    header = {
        "arch": record.arch.to_json(),
        "train_seed": int(record.train_seed),
        "clean_accuracy": float(record.clean_accuracy),
    }
    fileio.write_tensor_file(path, fileio.MAGIC_ZOO, header, record.weights)


def load_model(path) -> ModelRecord:
    header, tensors = fileio.read_tensor_file(path, fileio.MAGIC_ZOO)
    return ModelRecord(
        arch=ArchDescriptor.from_json(header["arch"]),
        weights=tensors,
        train_seed=header["train_seed"],
        clean_accuracy=header["clean_accuracy"],
    )


@dataclass
class TaskSplit:
    train_models: list
    test_model: ModelRecord
    n: int


def sample_task(repo, n: int, rng: Rng) -> TaskSplit:
    """Uniform draw of n+1 distinct models: n for meta-training, 1 held out."""
    if len(repo) < n + 1:
        raise ConfigError(f"repository has {len(repo)} models, need at least n+1={n + 1}")
    if n < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {n}")
    idx = rng.choice_without_replacement(len(repo), n + 1)
    return TaskSplit(train_models=[repo[i] for i in idx[:n]], test_model=repo[idx[n]], n=n)


def train_default_zoo(dataset: Dataset, zoo_seed: int, epochs: int = 15,
                      learning_rate: float = 0.05, batch_size: int = 32):
    root = Rng(zoo_seed)
    records = []
    for arch in default_architectures(dataset.spec.n_classes, dataset.spec.image_size):
        seed = int(root.derive("train", arch.name).seed)
        records.append(train_model(arch, dataset, seed, epochs, learning_rate, batch_size))
    return records
