"""SCRNet assembly, parameter counting and checkpoint files."""

from __future__ import annotations

import dataclasses
import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn_ops import BatchNorm2d, Conv2d, ConvSpec, ParameterStore, max_pool2d, relu
from .scrm import SCRM, cr_channels
from .tensor import ShapeError, Tensor, concat

CKPT_MAGIC = b"SCRN"
CKPT_VERSION = 1


class ConfigError(ValueError):
    """A ModelConfig violates an architectural constraint."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the requested model."""


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 1
    depth: int = 5
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    split_ratio: float = 0.5
    squeeze_ratio: int = 2
    gwc_groups: int = 2
    gn_groups: int | None = None
    ablate_fam: bool = False
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    def validate(self) -> "ModelConfig":
        if self.in_channels < 1 or self.num_classes < 1:
            raise ConfigError("in_channels and num_classes must be positive")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if len(self.widths) != self.depth:
            raise ConfigError(f"widths has {len(self.widths)} entries but depth is {self.depth}")
        for w in self.widths:
            if w < 8 or w % 4:
                raise ConfigError(f"every width must be >= 8 and divisible by 4, got {w}")
            try:
                cr_channels(w, self.split_ratio, self.squeeze_ratio, self.gwc_groups)
            except ValueError as exc:
                raise ConfigError(f"width {w}: {exc}") from None
            groups = self.gn_groups if self.gn_groups is not None else min(16, w)
            if w % groups:
                raise ConfigError(f"gn_groups {groups} must divide width {w}")
        return self

    @property
    def stride_multiple(self) -> int:
        return 2 ** (self.depth - 1)

    def canonical_text(self) -> str:
        """Architecture-defining fields only (seed excluded), one ``key=value`` per line."""
        d = dataclasses.asdict(self)
        d.pop("seed")
        return "".join(f"{k}={_fmt(d[k])}\n" for k in sorted(d))

    def fingerprint(self) -> int:
        digest = hashlib.blake2b(self.canonical_text().encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


@dataclass
class EncoderLevel:
    conv: Conv2d
    bn: BatchNorm2d
    scrm: SCRM

    def __call__(self, x: Tensor) -> Tensor:
        return self.scrm(relu(self.bn(self.conv(x))))


@dataclass
class DecoderLevel:
    up: Conv2d
    conv: Conv2d
    bn: BatchNorm2d

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        y = concat([self.up(x), skip], axis=1)
        return relu(self.bn(self.conv(y)))


def _batch_norms(obj, out: list) -> list:
    if isinstance(obj, BatchNorm2d):
        out.append(obj)
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            _batch_norms(getattr(obj, f.name), out)
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            _batch_norms(item, out)
    return out


@dataclass
class SCRNet:
    cfg: ModelConfig
    store: ParameterStore
    encoder: list[EncoderLevel]
    decoder: list[DecoderLevel]
    head: Conv2d
    training: bool = True
    _norms: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._norms = _batch_norms([self.encoder, self.decoder], [])

    def train(self, mode: bool = True) -> "SCRNet":
        self.training = mode
        for bn in self._norms:
            bn.training = mode
        return self

    def eval(self) -> "SCRNet":
        return self.train(False)

    def parameters(self):
        return list(self.store.values())

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)


def build_model(cfg: ModelConfig) -> SCRNet:
    """Encoder levels (conv3x3+BN+ReLU+SCRM, max-pool between), mirrored decoder, 1x1 head."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    store = ParameterStore()
    encoder = []
    cin = cfg.in_channels
    for i, w in enumerate(cfg.widths):
        name = f"enc.{i}"
        encoder.append(
            EncoderLevel(
                Conv2d.build(store, f"{name}.conv", ConvSpec(cin, w, 3, 1, 1), rng, bias=False),
                BatchNorm2d.build(store, f"{name}.bn", w),
                SCRM.build(
                    store, f"{name}.scrm", w, rng, cfg.split_ratio, cfg.squeeze_ratio, cfg.gwc_groups,
                    cfg.gn_groups, cfg.ablate_fam,
                ),
            )
        )
        cin = w
    decoder = []
    for j in range(cfg.depth - 2, -1, -1):
        wj, wn = cfg.widths[j], cfg.widths[j + 1]
        name = f"dec.{j}"
        decoder.append(
            DecoderLevel(
                Conv2d.build(store, f"{name}.up", ConvSpec(wn, wj, 3, 2, 1, output_padding=1), rng, transpose=True),
                Conv2d.build(store, f"{name}.conv", ConvSpec(2 * wj, wj, 3, 1, 1), rng, bias=False),
                BatchNorm2d.build(store, f"{name}.bn", wj),
            )
        )
    head = Conv2d.build(store, "head", ConvSpec(cfg.widths[0], cfg.num_classes), rng)
    return SCRNet(cfg, store, encoder, decoder, head)


def check_input(model: SCRNet, x: Tensor) -> None:
    cfg = model.cfg
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (N,{cfg.in_channels},H,W) input, got {x.shape}")
    m = cfg.stride_multiple
    if x.shape[2] % m or x.shape[3] % m:
        raise ShapeError(f"input extent {x.shape[2:]} not divisible by 2^(depth-1) = {m}")


def forward(model: SCRNet, x: Tensor, return_skips: bool = False):
    """Logits of shape (N, num_classes, H, W); optionally the encoder skip maps too."""
    check_input(model, x)
    skips = []
    h = x
    for i, level in enumerate(model.encoder):
        h = level(h)
        skips.append(h)
        if i < len(model.encoder) - 1:
            h = max_pool2d(h)
    for level, skip in zip(model.decoder, reversed(skips[:-1])):
        h = level(h, skip)
    logits = model.head(h)
    if return_skips:
        return logits, skips
    return logits


def count_params(model: SCRNet) -> int:
    return model.store.count()


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------


def checkpoint_bytes(model: SCRNet) -> bytes:
    state = model.store.state()
    parts = [CKPT_MAGIC, struct.pack("<IQI", CKPT_VERSION, model.cfg.fingerprint(), len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: SCRNet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[int, dict[str, np.ndarray]]:
    """Parse a checkpoint into (fingerprint, ordered name -> float32 array)."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 + 16 + 4:
        raise CheckpointError(f"truncated checkpoint ({len(buf)} bytes)")
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(4)
    version, fingerprint, count = r.unpack("<IQI")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        entries[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} unexpected trailing bytes")
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC-32 mismatch: checkpoint is corrupt")
    return fingerprint, entries


def load_checkpoint(path, cfg: ModelConfig) -> SCRNet:
    fingerprint, entries = read_checkpoint(path)
    model = build_model(cfg)
    state = model.store.state()
    for name, arr in state.items():
        if name not in entries:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if entries[name].shape != arr.shape:
            raise CheckpointError(f"parameter {name!r} has shape {entries[name].shape}, model expects {arr.shape}")
    for name in entries:
        if name not in state:
            raise CheckpointError(f"checkpoint has unexpected parameter {name!r}")
    if fingerprint != cfg.fingerprint():
        raise CheckpointError("architecture fingerprint does not match the requested configuration")
    for name, arr in state.items():
        arr[...] = entries[name].astype(np.float64)
    return model
