"""Weight-shared Siamese encoder-decoder for pixelwise change detection.

Both acquisition dates run through the same encoder (one parameter set,
referenced twice). The deepest feature volumes are differenced, then a stack of
stride-2 transposed convolutions restores the patch size and a pointwise
classifier produces two-class log-probabilities.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from urbdiff import tensor as T
from urbdiff.errors import (
    ConfigError,
    IncompatibleCheckpoint,
    NumericFault,
    ParseError,
    ShapeError,
)
from urbdiff.raster import GeoTransform, Raster

log = logging.getLogger(__name__)

DIFF_MODES = ("absolute", "euclidean")
CHECKPOINT_MAGIC = b"SCDC"
CHECKPOINT_VERSION = 1


@dataclass
class SiameseConfig:
    in_bands: int = 13
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    patch_size: int = 32
    diff_mode: str = "absolute"

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        if self.in_bands < 1:
            raise ConfigError("in_bands must be positive")
        if not self.encoder_channels:
            raise ConfigError("encoder_channels must not be empty")
        if any(b <= a for a, b in zip(self.encoder_channels, self.encoder_channels[1:])):
            raise ConfigError("encoder_channels must be strictly increasing")
        if self.diff_mode not in DIFF_MODES:
            raise ConfigError(f"diff_mode must be one of {DIFF_MODES}")
        if self.patch_size % (2 ** len(self.encoder_channels)):
            raise ConfigError(
                f"patch_size {self.patch_size} not divisible by 2^{len(self.encoder_channels)}"
            )

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    def decoder_channels(self) -> list[tuple[int, int]]:
        """(in, out) channel pairs of the transposed-convolution stack."""
        chans = self.encoder_channels
        first = 1 if self.diff_mode == "euclidean" else chans[-1]
        outs = list(reversed(chans[:-1])) + [chans[0]]
        ins = [first] + outs[:-1]
        return list(zip(ins, outs))

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c_in = self.in_bands
        for i, c in enumerate(self.encoder_channels):
            shapes[f"enc{i}.weight"] = (c, c_in, 3, 3)
            shapes[f"enc{i}.bias"] = (c,)
            c_in = c
        for i, (ci, co) in enumerate(self.decoder_channels()):
            shapes[f"dec{i}.weight"] = (ci, co, 2, 2)
        shapes["cls.weight"] = (2, self.encoder_channels[0])
        shapes["cls.bias"] = (2,)
        return shapes

    def as_dict(self) -> dict:
        return {
            "in_bands": self.in_bands,
            "encoder_channels": list(self.encoder_channels),
            "patch_size": self.patch_size,
            "diff_mode": self.diff_mode,
        }


class Network:
    """Ordered named parameters of the Siamese model.

    The encoder parameters exist once; :meth:`encode` is called for each
    branch with the very same tensors, so weight sharing is structural.
    """

    def __init__(self, config: SiameseConfig, params: dict[str, T.Tensor]):
        expected = config.parameter_shapes()
        if list(params) != list(expected):
            raise IncompatibleCheckpoint(
                f"parameter names {list(params)} do not match configuration {list(expected)}"
            )
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise IncompatibleCheckpoint(
                    f"{name}: shape {tuple(params[name].shape)} != expected {shape}"
                )
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: SiameseConfig, seed: int = 0) -> "Network":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in config.parameter_shapes().items():
            if name.endswith(".bias"):
                data = np.zeros(shape, np.float32)
            else:
                if name.startswith("enc"):
                    fan_in = shape[1] * 9
                elif name.startswith("dec"):
                    fan_in = shape[0] * 4
                else:
                    fan_in = shape[1]
                data = T.init_uniform(shape, fan_in, rng)
            params[name] = T.parameter(data, name)
        return cls(config, params)

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def encoder_parameters(self) -> list[T.Tensor]:
        return [p for n, p in self.params.items() if n.startswith("enc")]

    def encode(self, x: T.Tensor) -> T.Tensor:
        for i in range(self.config.depth):
            x = T.conv2d(x, self.params[f"enc{i}.weight"], self.params[f"enc{i}.bias"])
            x = T.maxpool2x2(T.relu(x))
        return x

    def decode(self, d: T.Tensor) -> T.Tensor:
        for i in range(len(self.config.decoder_channels())):
            d = T.relu(T.conv_transpose2d(d, self.params[f"dec{i}.weight"]))
        return T.conv1x1(d, self.params["cls.weight"], self.params["cls.bias"])

    def copy(self) -> "Network":
        return Network(self.config, {n: T.parameter(p.data.copy(), n) for n, p in self.params.items()})


def _as_tensor(x) -> T.Tensor:
    return x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float32))


def forward(net: Network, a, b) -> T.Tensor:
    """Log-probabilities (N, 2, H, W) of no-change / change for patch batches a, b."""
    a, b = _as_tensor(a), _as_tensor(b)
    cfg = net.config
    if a.shape != b.shape:
        raise ShapeError(f"patch shapes differ: {a.shape} vs {b.shape}")
    if a.data.ndim != 4 or a.shape[1] != cfg.in_bands:
        raise ShapeError(f"expected (N, {cfg.in_bands}, H, W) patches, got {a.shape}")
    if a.shape[2] % (2 ** cfg.depth) or a.shape[3] % (2 ** cfg.depth):
        raise ShapeError(f"patch size {a.shape[2:]} not divisible by 2^{cfg.depth}")
    fa = net.encode(a)
    fb = net.encode(b)
    diff = T.sub(fa, fb)
    if cfg.diff_mode == "absolute":
        diff = T.absolute(diff)
    else:
        diff = T.channel_norm(diff)
    return T.log_softmax(net.decode(diff), axis=1)


# --------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    net: Network
    trace: list[EpochStats]


def _stack(patches, augment_rng=None):
    from urbdiff.dataset import augment  # local import: dataset depends on raster only

    a, b, y = [], [], []
    for p in patches:
        if augment_rng is not None:
            p = augment(p, int(augment_rng.integers(8)))
        a.append(p.a)
        b.append(p.b)
        y.append(p.label)
    return np.stack(a), np.stack(b), np.stack(y)


def inverse_frequency_weights(labels: np.ndarray) -> tuple[float, float]:
    from urbdiff.dataset import weights_from_counts

    n1 = int(np.count_nonzero(labels))
    return weights_from_counts(labels.size - n1, n1)


def train(net: Network, patches: Sequence, epochs: int, batch: int = 16, lr: float = 0.01,
          momentum: float = 0.9, class_weights: tuple[float, float] | None = None,
          seed: int = 0, weight_decay: float = 0.0, augment: bool = False,
          checkpoint: str | Path | None = None,
          on_epoch: Callable[[EpochStats], None] | None = None) -> TrainResult:
    """Mini-batch SGD over a list of labeled patch pairs.

    Parameters are updated in place. Per-epoch mean loss and pixel accuracy
    (measured on the forward pass preceding each update) are returned.
    """
    if not patches:
        raise ValueError("no training patches")
    if class_weights is None:
        class_weights = inverse_frequency_weights(np.stack([p.label for p in patches]))
    rng = np.random.default_rng(seed)
    aug_rng = np.random.default_rng(rng.integers(2**63)) if augment else None
    opt = T.SGD(net.parameters(), lr, momentum, weight_decay)
    trace = []
    n = len(patches)
    batch_index = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct, pixels, count = 0.0, 0, 0, 0
        for start in range(0, n, batch):
            chunk = [patches[i] for i in order[start : start + batch]]
            a, b, y = _stack(chunk, aug_rng)
            try:
                logp = forward(net, a, b)
                loss = T.nll_weighted(logp, y, class_weights)
                loss.backward()
                opt.step()
            except NumericFault as exc:
                raise NumericFault(f"{exc} (batch {batch_index})", batch_index) from exc
            loss_sum += float(loss.data) * len(chunk)
            count += len(chunk)
            correct += int((logp.data.argmax(axis=1) == y).sum())
            pixels += y.size
            batch_index += 1
        stats = EpochStats(epoch, loss_sum / count, correct / pixels)
        log.info("epoch %d loss %.4f acc %.4f", stats.epoch, stats.loss, stats.accuracy)
        trace.append(stats)
        if on_epoch:
            on_epoch(stats)
    if checkpoint is not None:
        save_checkpoint(net, checkpoint)
    return TrainResult(net, trace)


def evaluate(net: Network, patches: Sequence, batch: int = 32,
             class_weights: tuple[float, float] = (1.0, 1.0)) -> tuple[float, float]:
    """Mean loss and pixel accuracy over patches, without updating anything."""
    loss_sum, correct, pixels = 0.0, 0, 0
    for start in range(0, len(patches), batch):
        a, b, y = _stack(patches[start : start + batch])
        logp = forward(net, a, b)
        loss_sum += float(T.nll_weighted(logp, y, class_weights).data) * len(y)
        correct += int((logp.data.argmax(axis=1) == y).sum())
        pixels += y.size
    return loss_sum / len(patches), correct / pixels


# --------------------------------------------------------------------------
# inference


@dataclass
class ChangeMap:
    labels: np.ndarray  # (H, W) uint8, 1 = change
    probabilities: np.ndarray  # (H, W) float32 change probability

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def to_rasters(self, geo: GeoTransform) -> tuple[Raster, Raster]:
        return (Raster(self.labels.astype(np.float32), geo, ("change",)),
                Raster(self.probabilities, geo, ("p_change",)))


def predict_scene(net: Network, scene_a: Raster, scene_b: Raster, batch: int = 16,
                  threads: int = 1) -> ChangeMap:
    """Tile a coregistered scene pair, average log-probabilities, threshold by argmax.

    Tiles are ``patch_size`` wide with stride ``patch_size // 2``; the scene is
    reflection-padded so every pixel is covered by the same number of tiles.
    """
    cfg = net.config
    if scene_a.bands != cfg.in_bands or scene_b.bands != cfg.in_bands:
        raise ShapeError(
            f"network expects {cfg.in_bands} bands, got {scene_a.bands} and {scene_b.bands}"
        )
    if (scene_a.height, scene_a.width) != (scene_b.height, scene_b.width):
        raise ShapeError("scenes must have equal dimensions")
    p = cfg.patch_size
    s = p // 2
    h, w = scene_a.height, scene_a.width
    pads = ((0, 0), (s, s + (-h) % s), (s, s + (-w) % s))
    xa = np.pad(scene_a.samples.astype(np.float32), pads, mode="reflect")
    xb = np.pad(scene_b.samples.astype(np.float32), pads, mode="reflect")
    ph, pw = xa.shape[1:]
    offsets = [(r, c) for r in range(0, ph - p + 1, s) for c in range(0, pw - p + 1, s)]
    acc = np.zeros((2, ph, pw), np.float64)
    hits = np.zeros((ph, pw), np.int32)

    def run(chunk):
        a = np.stack([xa[:, r : r + p, c : c + p] for r, c in chunk])
        b = np.stack([xb[:, r : r + p, c : c + p] for r, c in chunk])
        return chunk, forward(net, a, b).data

    chunks = [offsets[i : i + batch] for i in range(0, len(offsets), batch)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = map(run, chunks)
    for chunk, logp in results:
        for (r, c), lp in zip(chunk, logp):
            acc[:, r : r + p, c : c + p] += lp
            hits[r : r + p, c : c + p] += 1
    mean = acc[:, s : s + h, s : s + w] / hits[s : s + h, s : s + w]
    labels = (mean[1] > mean[0]).astype(np.uint8)
    prob = 1.0 / (1.0 + np.exp(mean[0] - mean[1]))
    return ChangeMap(labels, prob.astype(np.float32))


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: Network, path) -> None:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(net.params))
    for name, p in net.params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", p.data.ndim)
        out += struct.pack(f"<{p.data.ndim}I", *p.shape)
        out += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"{path}: checkpoint truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8", "replace")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        params[name] = data.astype(np.float32)
    if pos != len(buf):
        raise ParseError(f"{path}: {len(buf) - pos} trailing bytes after checkpoint")
    return params


def config_from_shapes(shapes: dict[str, tuple[int, ...]], patch_size: int | None = None) -> SiameseConfig:
    """Recover the architecture implied by a checkpoint's parameter shapes."""
    try:
        depth = sum(1 for n in shapes if n.startswith("enc") and n.endswith(".weight"))
        channels = [shapes[f"enc{i}.weight"][0] for i in range(depth)]
        in_bands = shapes["enc0.weight"][1]
        first_dec = shapes["dec0.weight"][0]
    except (KeyError, IndexError) as exc:
        raise IncompatibleCheckpoint(f"checkpoint lacks expected parameters ({exc})") from exc
    mode = "euclidean" if first_dec == 1 and channels[-1] != 1 else "absolute"
    unit = 2 ** depth
    if patch_size is None:
        patch_size = max(unit, 32 // unit * unit)
    return SiameseConfig(in_bands, channels, patch_size, mode)


def load_checkpoint(path, config: SiameseConfig | None = None) -> Network:
    """Load a checkpoint; with ``config`` given, shapes must match it exactly."""
    arrays = read_checkpoint(path)
    shapes = {n: a.shape for n, a in arrays.items()}
    if config is None:
        config = config_from_shapes(shapes)
    expected = config.parameter_shapes()
    if shapes != expected or list(shapes) != list(expected):
        raise IncompatibleCheckpoint(f"{path}: parameters do not match the configured network")
    return Network(config, {n: T.parameter(a, n) for n, a in arrays.items()})


def checkpoint_roundtrip(net: Network, path) -> Network:
    save_checkpoint(net, path)
    return load_checkpoint(path, net.config)
