"""
Mobile-UNet: a MobileNetV2 encoder feeding a five-deconvolution decoder.

The decoder alternates stride-2 transposed convolutions (k=4) with
inverted-residual blocks (t=6). Before each decoder block the upsampled
tensor is added elementwise to the encoder feature map of the same shape,
so the skip widths dictate the decoder widths. A sigmoid head yields one
probability map (segmentation) or two (localization: inner and outer
boundary regions).

Weights are stored in the ``IRKW`` container (see :func:`write_container`).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor_nn as nn
from .errors import (
    ChecksumError,
    ConfigurationError,
    ContainerError,
    DimensionError,
    MagicError,
    TensorNameError,
    TensorShapeError,
    TruncatedError,
    VersionError,
)
from .io_utils import atomic_write_bytes, atomic_write_text
from .tensor_nn import LayerSpec, Tensor

TASKS = ("segmentation", "localization")
TASK_CHANNELS = {"segmentation": 1, "localization": 2}

MAGIC = b"IRKW"
FORMAT_VERSION = 1

# (expansion t, channels c, repeats n, first stride s, tap last block as skip)
MOBILENETV2_STAGES = (
    (1, 16, 1, 1, True),
    (6, 24, 2, 2, True),
    (6, 32, 3, 2, True),
    (6, 64, 4, 2, False),
    (6, 96, 3, 1, True),
    (6, 160, 3, 2, False),
    (6, 320, 1, 1, False),
)

# Same topology at a fraction of the width, for desk-scale training.
REDUCED_STAGES = (
    (1, 8, 1, 1, True),
    (4, 12, 1, 2, True),
    (4, 16, 2, 2, True),
    (4, 24, 1, 2, False),
    (4, 32, 1, 1, True),
    (4, 48, 1, 2, False),
)


@dataclass(frozen=True)
class ModelConfig:
    task: str
    input_size: tuple[int, int, int]
    stem: LayerSpec
    encoder: tuple[LayerSpec, ...]
    taps: tuple[int, ...]  # 1-based encoder block indices whose outputs feed the decoder
    decoder: tuple[LayerSpec, ...]

    @property
    def out_channels(self) -> int:
        return self.decoder[-1].out_channels

    def validate(self) -> list[tuple[str, tuple[int, int, int]]]:
        """Compose every stage's shape formula; return (stage name, shape) pairs.

        Raises ConfigurationError naming the first stage that does not compose.
        """
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        kinds = [s.kind for s in self.decoder]
        expected = ["transposed_conv", "inverted_residual"] * 4 + ["transposed_conv"]
        if kinds != expected:
            raise ConfigurationError(
                "decoder must alternate 5 transposed_conv and 4 inverted_residual stages, "
                f"got {kinds}"
            )
        if len(self.taps) != 4:
            raise ConfigurationError(f"need exactly 4 skip taps, got {len(self.taps)}")
        if self.out_channels != TASK_CHANNELS[self.task]:
            raise ConfigurationError(
                f"stage decoder.up5: {self.task} head needs {TASK_CHANNELS[self.task]} "
                f"output channels, got {self.out_channels}"
            )

        shapes: list[tuple[str, tuple[int, int, int]]] = []
        c, h, w = self.input_size

        def fail(stage, msg):
            raise ConfigurationError(f"stage {stage}: {msg}")

        def conv_like(stage, spec, c, h, w, pad):
            if spec.in_channels != c:
                fail(stage, f"expects {spec.in_channels} input channels, receives {c}")
            if spec.k > h + 2 * pad or spec.k > w + 2 * pad:
                fail(stage, f"kernel {spec.k} exceeds input {h}x{w}")
            return (
                spec.out_channels,
                nn.conv_output_size(h, spec.k, spec.s, pad),
                nn.conv_output_size(w, spec.k, spec.s, pad),
            )

        c, h, w = conv_like("encoder.stem", self.stem, c, h, w, self.stem.padding)
        shapes.append(("encoder.stem", (c, h, w)))
        skips = {}
        for i, spec in enumerate(self.encoder, 1):
            name = f"encoder.block{i}"
            if spec.kind != "inverted_residual":
                fail(name, f"encoder blocks must be inverted_residual, got {spec.kind}")
            c, h, w = conv_like(name, spec, c, h, w, spec.padding or spec.k // 2)
            shapes.append((name, (c, h, w)))
            if i in self.taps:
                skips[i] = (c, h, w)
        missing = [t for t in self.taps if t not in skips]
        if missing:
            fail("encoder", f"tap indices {missing} do not name encoder blocks")
        ordered = [skips[t] for t in sorted(self.taps, reverse=True)]

        for j, spec in enumerate(self.decoder):
            if spec.kind == "transposed_conv":
                name = f"decoder.up{j // 2 + 1}"
                if spec.in_channels != c:
                    fail(name, f"expects {spec.in_channels} input channels, receives {c}")
                c = spec.out_channels
                h = nn.conv_transpose_output_size(h, spec.k, spec.s, spec.padding)
                w = nn.conv_transpose_output_size(w, spec.k, spec.s, spec.padding)
            else:
                name = f"decoder.ir{j // 2 + 1}"
                skip = ordered[j // 2]
                if (c, h, w) != skip:
                    fail(name, f"decoder tensor {(c, h, w)} cannot be added to skip {skip}")
                c, h, w = conv_like(name, spec, c, h, w, spec.padding or spec.k // 2)
            shapes.append((name, (c, h, w)))
        if (h, w) != self.input_size[1:]:
            fail("decoder.up5", f"output spatial size {(h, w)} differs from input {self.input_size[1:]}")
        return shapes

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "input_size": list(self.input_size),
            "stem": asdict(self.stem),
            "encoder": [asdict(s) for s in self.encoder],
            "taps": list(self.taps),
            "decoder": [asdict(s) for s in self.decoder],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(
            task=d["task"],
            input_size=tuple(d["input_size"]),
            stem=LayerSpec(**d["stem"]),
            encoder=tuple(LayerSpec(**s) for s in d["encoder"]),
            taps=tuple(d["taps"]),
            decoder=tuple(LayerSpec(**s) for s in d["decoder"]),
        )


def make_config(task: str, input_size: int = 224, stem_channels: int = 32, stages=MOBILENETV2_STAGES) -> ModelConfig:
    """Build a config from a MobileNetV2-style stage table.

    Decoder widths mirror the tapped skip widths so additive fusion
    type-checks without projections.
    """
    if task not in TASKS:
        raise ConfigurationError(f"task must be one of {TASKS}, got {task!r}")
    stem = LayerSpec("standard_conv", 3, stem_channels, k=3, s=2, padding=1)
    encoder, taps = [], []
    cin = stem_channels
    for t, c, n, s, tap in stages:
        for r in range(n):
            encoder.append(LayerSpec("inverted_residual", cin, c, k=3, s=s if r == 0 else 1, t=t))
            cin = c
        if tap:
            taps.append(len(encoder))
    skip_widths = [encoder[i - 1].out_channels for i in reversed(taps)]
    decoder = []
    for width in skip_widths:
        decoder.append(LayerSpec("transposed_conv", cin, width, k=4, s=2, padding=1))
        decoder.append(LayerSpec("inverted_residual", width, width, k=3, s=1, t=6))
        cin = width
    decoder.append(LayerSpec("transposed_conv", cin, TASK_CHANNELS[task], k=4, s=2, padding=1))
    config = ModelConfig(task, (3, input_size, input_size), stem, tuple(encoder), tuple(taps), tuple(decoder))
    config.validate()
    return config


def segmentation_config() -> ModelConfig:
    return make_config("segmentation")


def localization_config() -> ModelConfig:
    return make_config("localization")


def reduced_config(task: str = "segmentation", input_size: int = 64) -> ModelConfig:
    """Narrow variant with the same stage topology; input must be divisible by 32."""
    return make_config(task, input_size, stem_channels=8, stages=REDUCED_STAGES)


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

def _bn_names(prefix: str, c: int) -> tuple[dict, dict]:
    return (
        {f"{prefix}.gamma": (c,), f"{prefix}.beta": (c,)},
        {f"{prefix}.running_mean": (c,), f"{prefix}.running_var": (c,)},
    )


def parameter_layout(config: ModelConfig) -> tuple[dict[str, tuple], dict[str, tuple]]:
    """Ordered (learnable parameter shapes, buffer shapes) for ``config``."""
    params: dict[str, tuple] = {}
    buffers: dict[str, tuple] = {}
    stem = config.stem
    params["encoder.stem.conv.weight"] = (stem.out_channels, stem.in_channels, stem.k, stem.k)
    p, b = _bn_names("encoder.stem.bn", stem.out_channels)
    params.update(p)
    buffers.update(b)

    def add_block(prefix, spec):
        for name, shape in nn.inverted_residual_param_shapes(spec).items():
            params[f"{prefix}.{name}"] = shape
            if name.endswith(".gamma"):
                base = name[: -len(".gamma")]
                buffers[f"{prefix}.{base}.running_mean"] = shape
                buffers[f"{prefix}.{base}.running_var"] = shape

    for i, spec in enumerate(config.encoder, 1):
        add_block(f"encoder.block{i}", spec)
    up = ir = 0
    for spec in config.decoder:
        if spec.kind == "transposed_conv":
            up += 1
            params[f"decoder.up{up}.weight"] = (spec.in_channels, spec.out_channels, spec.k, spec.k)
            params[f"decoder.up{up}.bias"] = (spec.out_channels,)
        else:
            ir += 1
            add_block(f"decoder.ir{ir}", spec)
    return params, buffers


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class ImportReport:
    loaded: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


class MobileUNet:
    """A runnable Mobile-UNet: config, named parameters and BN running statistics."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers
        # per-channel (mean, std) applied by preprocessing when a pretrained encoder is loaded
        self.normalization: tuple[list[float], list[float]] | None = None
        self._index_blocks()

    def _index_blocks(self):
        self._blocks = {}
        for name in self.params:
            parts = name.split(".")
            if parts[1].startswith(("block", "ir")):
                prefix = ".".join(parts[:2])
                self._blocks.setdefault(prefix, {})[".".join(parts[2:])] = self.params[name]
        self._block_buffers = {}
        for name, arr in self.buffers.items():
            parts = name.split(".")
            if parts[1].startswith(("block", "ir")):
                prefix = ".".join(parts[:2])
                self._block_buffers.setdefault(prefix, {})[".".join(parts[2:])] = arr

    @property
    def task(self) -> str:
        return self.config.task

    @property
    def out_channels(self) -> int:
        return self.config.out_channels

    @property
    def input_hw(self) -> int:
        return self.config.input_size[1]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def encoder_names(self) -> list[str]:
        return [n for n in self.state_names() if n.startswith("encoder.")]

    def decoder_names(self) -> list[str]:
        return [n for n in self.state_names() if n.startswith("decoder.")]

    def state_names(self) -> list[str]:
        return list(self.params) + list(self.buffers)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, in a fixed order."""
        state = {n: t.data for n, t in self.params.items()}
        state.update(self.buffers)
        return state

    def forward(self, x, mode: str = "infer", return_skips: bool = False):
        """Run the network on a (3,H,W) image or (N,3,H,W) batch.

        ``mode`` selects batch-norm behaviour ('train' uses and updates
        batch statistics). Returns sigmoid probabilities, plus the list of
        skip tensors (shallowest first) when ``return_skips`` is set.
        """
        x = nn.as_tensor(x)
        expected = tuple(self.config.input_size)
        if x.shape[-3:] != expected or x.ndim not in (3, 4):
            raise DimensionError(f"model expects input {expected} (optionally batched), got {x.shape}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype)) if x._backward is None else x
        p, buf = self.params, self.buffers
        stem = self.config.stem
        h = nn.conv2d(x, p["encoder.stem.conv.weight"], stride=stem.s, padding=stem.padding)
        h = nn.relu6(
            nn.batchnorm(
                h,
                p["encoder.stem.bn.gamma"],
                p["encoder.stem.bn.beta"],
                buf["encoder.stem.bn.running_mean"],
                buf["encoder.stem.bn.running_var"],
                mode=mode,
            )
        )
        skips = []
        for i, spec in enumerate(self.config.encoder, 1):
            key = f"encoder.block{i}"
            h = nn.inverted_residual(h, spec, self._blocks[key], self._block_buffers[key], mode)
            if i in self.config.taps:
                skips.append(h)
        up = ir = 0
        for spec in self.config.decoder:
            if spec.kind == "transposed_conv":
                up += 1
                h = nn.conv_transpose2d(
                    h, p[f"decoder.up{up}.weight"], p[f"decoder.up{up}.bias"], stride=spec.s, padding=spec.padding
                )
            else:
                ir += 1
                h = nn.add(h, skips[-ir])
                key = f"decoder.ir{ir}"
                h = nn.inverted_residual(h, spec, self._blocks[key], self._block_buffers[key], mode)
        out = nn.sigmoid(h)
        return (out, skips) if return_skips else out

    __call__ = forward

    def predict(self, image) -> np.ndarray:
        """Inference-mode probabilities as a plain array, no graph recorded."""
        with nn.no_grad():
            return self.forward(image, mode="infer").data

    def copy(self) -> "MobileUNet":
        params = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()}
        buffers = {n: a.copy() for n, a in self.buffers.items()}
        model = MobileUNet(self.config, params, buffers)
        model.normalization = self.normalization
        return model

    def load_state(self, state: Mapping[str, np.ndarray]):
        """Copy arrays from ``state`` into the model (names and shapes must match)."""
        for name, arr in state.items():
            if name in self.params:
                self.params[name].data = np.array(arr, dtype=self.dtype)
            elif name in self.buffers:
                self.buffers[name][...] = arr
            else:
                raise TensorNameError(f"unknown tensor name {name!r}")


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> MobileUNet:
    """Initialize a model: fan-in scaled uniform convolutions, gamma=1, beta=0, zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    param_shapes, buffer_shapes = parameter_layout(config)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes.items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith((".beta", ".bias")):
            arr = np.zeros(shape)
        else:
            if name.startswith("decoder.up"):
                fan_in = shape[0] * shape[2] * shape[3] // 4
            else:
                fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(3.0 / max(fan_in, 1))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    buffers = {
        name: (np.ones(shape, dtype) if name.endswith("running_var") else np.zeros(shape, dtype))
        for name, shape in buffer_shapes.items()
    }
    return MobileUNet(config, params, buffers)


# ---------------------------------------------------------------------------
# Weight container
# ---------------------------------------------------------------------------

def encode_container(tensors: Mapping[str, np.ndarray], task: str) -> bytes:
    """Serialize named tensors.

    Layout (little-endian): ``IRKW`` | version u32 | task u8 (0 seg, 1 loc)
    | count u32 | per tensor: name-length u16, UTF-8 name, rank u8, dims
    u32 each, float32 data row-major | CRC-32 u32 of all preceding bytes.
    """
    buf = bytearray(MAGIC)
    buf += struct.pack("<IBI", FORMAT_VERSION, TASKS.index(task), len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def decode_container(data: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if len(data) < 4 or data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(data):
            raise TruncatedError(f"container is only {len(data)} bytes")
        raise MagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data) - 4:
            raise TruncatedError(f"container truncated at byte {pos} (needed {n} more)")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if len(data) < 8:
        raise TruncatedError("container truncated in header")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported container version {version}, expected {FORMAT_VERSION}")
    pos = 8
    task_byte, count = struct.unpack("<BI", take(5))
    if task_byte >= len(TASKS):
        raise ContainerError(f"unknown task byte {task_byte}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = values.astype(np.float32)
    trailing = len(data) - pos
    if trailing < 4:
        raise TruncatedError("container truncated before checksum")
    if trailing > 4:
        raise ContainerError(f"{trailing - 4} unexpected bytes after last tensor")
    (stored,) = struct.unpack("<I", data[pos:])
    actual = zlib.crc32(data[:pos]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"CRC mismatch: stored {stored:08x}, computed {actual:08x}")
    return TASKS[task_byte], tensors


def write_container(path, tensors: Mapping[str, np.ndarray], task: str):
    atomic_write_bytes(path, encode_container(tensors, task))


def read_container(path) -> tuple[str, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes())


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_weights(model: MobileUNet, path, metadata: Mapping | None = None):
    """Write the container plus a JSON sidecar carrying the config echo."""
    write_container(path, model.state_dict(), model.task)
    side = {"config": model.config.to_dict()}
    if model.normalization is not None:
        side["normalization"] = {"mean": list(model.normalization[0]), "std": list(model.normalization[1])}
    if metadata:
        side.update(metadata)
    atomic_write_text(sidecar_path(path), json.dumps(side, indent=2, sort_keys=True))


def read_sidecar(path) -> dict:
    side = sidecar_path(path)
    if side.exists():
        return json.loads(side.read_text())
    return {}


def load_weights(path, config: ModelConfig | None = None) -> MobileUNet:
    """Load a container into a fresh model built from ``config``.

    Without ``config``, the sidecar's config echo is used, falling back to
    the full-size default for the container's task.
    """
    task, tensors = read_container(path)
    side = read_sidecar(path)
    if config is None:
        config = ModelConfig.from_dict(side["config"]) if "config" in side else make_config(task)
    model = build_model(config, seed=0)
    expected = model.state_dict()
    for name, arr in tensors.items():
        if name not in expected:
            raise TensorNameError(f"container tensor {name!r} is not part of the model")
        if arr.shape != expected[name].shape:
            raise TensorShapeError(
                f"tensor {name!r} has shape {arr.shape}, model expects {expected[name].shape}"
            )
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise TensorNameError(f"container is missing tensor {missing[0]!r} ({len(missing)} missing)")
    if task != config.task:
        raise ConfigurationError(f"container task {task!r} does not match config task {config.task!r}")
    model.load_state(tensors)
    if "normalization" in side:
        model.normalization = (side["normalization"]["mean"], side["normalization"]["std"])
    return model


def import_pretrained_encoder(container_path, model: MobileUNet) -> ImportReport:
    """Replace encoder tensors with those found in a container.

    Non-encoder names are skipped. Any shape mismatch aborts before a
    single tensor is written. Normalization constants are taken from the
    container's sidecar when present.
    """
    _, tensors = read_container(container_path)
    encoder = set(model.encoder_names())
    state = model.state_dict()
    report = ImportReport()
    for name, arr in tensors.items():
        if name in encoder:
            if arr.shape != state[name].shape:
                raise TensorShapeError(
                    f"pretrained tensor {name!r} has shape {arr.shape}, model expects {state[name].shape}"
                )
            report.loaded.append(name)
        else:
            report.skipped.append(name)
    model.load_state({n: tensors[n] for n in report.loaded})
    side = read_sidecar(container_path)
    if "normalization" in side:
        model.normalization = (side["normalization"]["mean"], side["normalization"]["std"])
    return report
