"""Encoder / localizer-head / decoder architecture and freeze semantics.

The encoder is a stack of levels (two conv-bn-relu blocks, dropout,
then 2x2 max pooling); the localizer head flattens the deepest feature
volume into a two-output linear layer; the decoder mirrors the encoder
upward with nearest-neighbor upsampling and skip concatenation, ending
in a 1x1 convolution plus sigmoid.

Channel counts double per level from ``base_filters``.  Extending a
trained localizer into the segmentation network drops the head, freezes
every encoder parameter (batch-norm affine weights and running stats
included), and attaches a freshly initialized decoder.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, ParameterError, ShapeError, StateError
from .tensor import BatchNormState, Parameter, Tensor

CHECKPOINT_MAGIC = b"ODSEGCK1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    levels: int = 4
    base_filters: int = 16
    dropout_rate: float = 0.2

    def validate(self):
        s = self.input_size
        if s < 1 or (s & (s - 1)) != 0:
            raise ParameterError(f"input_size must be a power of two, got {s}")
        if self.levels < 1:
            raise ParameterError(f"levels must be >= 1, got {self.levels}")
        if s < 2 ** self.levels:
            raise ParameterError(f"input_size {s} < 2^levels ({2 ** self.levels})")
        if self.base_filters < 1:
            raise ParameterError(f"base_filters must be >= 1, got {self.base_filters}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def channels(self, level: int) -> int:
        return self.base_filters * 2 ** level

    @property
    def bottom_size(self) -> int:
        return self.input_size // 2 ** self.levels

    @property
    def bottom_channels(self) -> int:
        return self.channels(self.levels - 1)


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class ConvBlock:
    """3x3 conv -> batch norm -> relu."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.w = Parameter(_he_uniform(rng, (cout, cin, 3, 3), fan_in=cin * 9))
        self.b = Parameter(np.zeros(cout))
        self.gamma = Parameter(np.ones(cout))
        self.beta = Parameter(np.zeros(cout))
        self.bn_state = BatchNormState(cout)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        h = T.conv2d(x, self.w.tensor, self.b.tensor)
        h = T.batch_norm(h, self.gamma.tensor, self.beta.tensor, self.bn_state, mode)
        return T.relu(h)

    def entries(self, prefix: str):
        yield f"{prefix}.conv.w", self.w.values, self.w
        yield f"{prefix}.conv.b", self.b.values, self.b
        yield f"{prefix}.bn.gamma", self.gamma.values, self.gamma
        yield f"{prefix}.bn.beta", self.beta.values, self.beta
        yield f"{prefix}.bn.mean", self.bn_state.mean, None
        yield f"{prefix}.bn.var", self.bn_state.var, None


class EncoderLevel:
    def __init__(self, cin: int, cout: int, dropout_rate: float, rng: np.random.Generator):
        self.block1 = ConvBlock(cin, cout, rng)
        self.block2 = ConvBlock(cout, cout, rng)
        self.dropout_rate = dropout_rate

    def forward(self, x: Tensor, mode: str, rng) -> Tensor:
        h = self.block1.forward(x, mode)
        h = self.block2.forward(h, mode)
        return T.dropout(h, self.dropout_rate, mode, rng)

    def entries(self, prefix: str):
        yield from self.block1.entries(f"{prefix}.b1")
        yield from self.block2.entries(f"{prefix}.b2")


class DecoderLevel:
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.block1 = ConvBlock(cin, cout, rng)
        self.block2 = ConvBlock(cout, cout, rng)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return self.block2.forward(self.block1.forward(x, mode), mode)

    def entries(self, prefix: str):
        yield from self.block1.entries(f"{prefix}.b1")
        yield from self.block2.entries(f"{prefix}.b2")


class LocalizerHead:
    def __init__(self, features: int, rng: np.random.Generator):
        self.w = Parameter(_he_uniform(rng, (2, features), fan_in=features))
        self.b = Parameter(np.zeros(2))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w.tensor, self.b.tensor)

    def entries(self, prefix: str):
        yield f"{prefix}.linear.w", self.w.values, self.w
        yield f"{prefix}.linear.b", self.b.values, self.b


class SegmentHead:
    def __init__(self, cin: int, rng: np.random.Generator):
        self.w = Parameter(_he_uniform(rng, (1, cin, 1, 1), fan_in=cin))
        self.b = Parameter(np.zeros(1))

    def forward(self, x: Tensor) -> Tensor:
        return T.sigmoid(T.conv1x1(x, self.w.tensor, self.b.tensor))

    def entries(self, prefix: str):
        yield f"{prefix}.conv.w", self.w.values, self.w
        yield f"{prefix}.conv.b", self.b.values, self.b


def _build_encoder(cfg: ModelConfig, rng) -> list:
    levels = []
    cin = 1
    for lv in range(cfg.levels):
        cout = cfg.channels(lv)
        levels.append(EncoderLevel(cin, cout, cfg.dropout_rate, rng))
        cin = cout
    return levels


def _build_decoder(cfg: ModelConfig, rng) -> tuple:
    """Decoder levels stored deepest-first, plus the 1x1 output head."""
    levels = []
    up_ch = cfg.bottom_channels
    for lv in reversed(range(cfg.levels)):
        skip_ch = cfg.channels(lv)
        levels.append(DecoderLevel(up_ch + skip_ch, skip_ch, rng))
        up_ch = skip_ch
    return levels, SegmentHead(cfg.channels(0), rng)


class UNetModel:
    """Two-part network: encoder plus either a localizer head (phase 1)
    or a decoder (phase 2 / baseline)."""

    def __init__(self, cfg: ModelConfig, encoder, head=None, decoder=None,
                 seg_head=None, encoder_frozen: bool = False):
        self.cfg = cfg
        self.encoder = encoder
        self.head = head
        self.decoder = decoder
        self.seg_head = seg_head
        self.encoder_frozen = encoder_frozen
        self.meta: dict = {}

    @property
    def phase(self) -> str:
        return "localizer" if self.decoder is None else "segmenter"

    # -- parameter bookkeeping -------------------------------------------

    def entries(self):
        """(name, array, parameter-or-None) triples in checkpoint order."""
        for i, level in enumerate(self.encoder):
            yield from level.entries(f"enc{i}")
        if self.head is not None:
            yield from self.head.entries("head")
        if self.decoder is not None:
            for i, level in enumerate(self.decoder):
                yield from level.entries(f"dec{i}")
            yield from self.seg_head.entries("out")

    def parameters(self) -> list:
        return [p for _, _, p in self.entries() if p is not None]

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if not p.frozen]

    def parameter_count(self) -> int:
        return sum(p.values.size for p in self.parameters())

    def trainable_parameter_count(self) -> int:
        return sum(p.values.size for p in self.trainable_parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {name: arr.copy() for name, arr, _ in self.entries()}

    def load_state(self, state: dict):
        for name, arr, _ in self.entries():
            src = state[name]
            if src.shape != arr.shape:
                raise FormatError(f"state blob {name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def encoder_bytes(self) -> bytes:
        """Raw bytes of all encoder parameters and running stats, for
        bit-level freeze checks."""
        parts = []
        for i, level in enumerate(self.encoder):
            for _, arr, _ in level.entries(f"enc{i}"):
                parts.append(arr.tobytes())
        return b"".join(parts)

    # -- forward passes ----------------------------------------------------

    def _check_batch(self, batch: Tensor):
        s = self.cfg.input_size
        if batch.values.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (s, s):
            raise ShapeError(f"expected (B,1,{s},{s}) batch, got {batch.shape}")

    def _encode(self, batch: Tensor, mode: str, rng):
        skips = []
        h = batch
        for level in self.encoder:
            h = level.forward(h, mode, rng)
            skips.append(h)
            h = T.maxpool2(h)
        return skips, h


def build_localizer(cfg: ModelConfig, rng) -> UNetModel:
    """Phase-1 network: encoder plus (x, y) regression head.

    Weights are He-uniform, biases zero, batch-norm gamma 1 / beta 0;
    (cfg, seed) fully determines the result.
    """
    cfg.validate()
    rng = _as_rng(rng)
    encoder = _build_encoder(cfg, rng)
    features = cfg.bottom_channels * cfg.bottom_size ** 2
    head = LocalizerHead(features, rng)
    return UNetModel(cfg, encoder, head=head)


def extend_to_unet(model: UNetModel, rng) -> UNetModel:
    """Drop the localizer head, freeze the encoder (parameters and
    running stats), and attach a freshly initialized decoder."""
    if model.decoder is not None:
        raise StateError("model is already extended to a segmentation network")
    rng = _as_rng(rng)
    for p in model.parameters():
        p.frozen = True
    decoder, seg_head = _build_decoder(model.cfg, rng)
    model.head = None
    model.decoder = decoder
    model.seg_head = seg_head
    model.encoder_frozen = True
    return model


def build_baseline(cfg: ModelConfig, rng) -> UNetModel:
    """Full U-net with random initialization and nothing frozen."""
    cfg.validate()
    rng = _as_rng(rng)
    encoder = _build_encoder(cfg, rng)
    decoder, seg_head = _build_decoder(cfg, rng)
    return UNetModel(cfg, encoder, decoder=decoder, seg_head=seg_head)


def forward_localize(model: UNetModel, batch: Tensor, mode: str, rng=None) -> Tensor:
    """Predict (x, y) pixel coordinates for each image in the batch."""
    if model.head is None:
        raise StateError("model has no localizer head")
    model._check_batch(batch)
    _, bottom = model._encode(batch, mode, rng)
    b = bottom.shape[0]
    flat = bottom.reshape(b, -1)
    return model.head.forward(flat)


def forward_segment(model: UNetModel, batch: Tensor, mode: str, rng=None) -> Tensor:
    """Per-pixel foreground probabilities in (0, 1).

    A frozen encoder always runs in eval mode (no dropout, running
    statistics, no stat updates); an unfrozen (baseline) encoder follows
    the requested mode.
    """
    if model.decoder is None:
        raise StateError("model has no decoder; extend or build a baseline first")
    model._check_batch(batch)
    enc_mode = "eval" if model.encoder_frozen else mode
    skips, h = model._encode(batch, enc_mode, rng)
    for level, skip in zip(model.decoder, reversed(skips)):
        h = T.upsample2(h)
        h = T.concat_channels(h, skip)
        h = level.forward(h, mode)
    return model.seg_head.forward(h)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# -- checkpoint container ---------------------------------------------------


def save_model(model: UNetModel, path) -> None:
    """Versioned binary container: magic, version, JSON header, then raw
    little-endian float64 blobs in header order."""
    blobs = []
    payload = []
    for name, arr, param in model.entries():
        blobs.append({
            "name": name,
            "shape": list(arr.shape),
            "frozen": bool(param.frozen) if param is not None else None,
        })
        payload.append(arr.astype("<f8").tobytes())
    header = {
        "cfg": asdict(model.cfg),
        "phase": model.phase,
        "encoder_frozen": model.encoder_frozen,
        "meta": model.meta,
        "blobs": blobs,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for chunk in payload:
            fh.write(chunk)


def load_model(path) -> UNetModel:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 8 or not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", data, off)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    if len(data) < off + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    off += header_len

    try:
        cfg = ModelConfig(**header["cfg"])
        phase = header["phase"]
        blobs = header["blobs"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: incomplete header ({exc})") from None
    cfg.validate()

    # Build a skeleton with the right topology, then overwrite every array.
    if phase == "localizer":
        model = build_localizer(cfg, np.random.default_rng(0))
    elif phase == "segmenter":
        model = build_baseline(cfg, np.random.default_rng(0))
        model.encoder_frozen = bool(header.get("encoder_frozen", False))
    else:
        raise FormatError(f"{path}: unknown phase {phase!r}")
    model.meta = dict(header.get("meta", {}))

    entries = list(model.entries())
    if len(entries) != len(blobs):
        raise FormatError(f"{path}: expected {len(entries)} blobs, header lists {len(blobs)}")
    for (name, arr, param), blob in zip(entries, blobs):
        if blob["name"] != name:
            raise FormatError(f"{path}: blob order mismatch ({blob['name']} != {name})")
        if list(arr.shape) != blob["shape"]:
            raise FormatError(f"{path}: blob {name} shape {blob['shape']} != {list(arr.shape)}")
        nbytes = arr.size * 8
        if len(data) < off + nbytes:
            raise FormatError(f"{path}: truncated blob {name}")
        arr[...] = np.frombuffer(data[off:off + nbytes], dtype="<f8").reshape(arr.shape)
        off += nbytes
        if param is not None:
            param.frozen = bool(blob["frozen"])
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return model
