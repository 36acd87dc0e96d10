"""The two U-shaped restoration networks and their checkpoint format.

``EGRestormer`` stacks edge-guided attention blocks; ``LENet`` stacks gated
depthwise-conv blocks and refines its decoder output with an ESAB. Both predict
a residual that is added to the input and clamped to [0, 1].
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from adnet.errors import DimensionError, FormatError, IncompatibleError, ParameterError
from adnet.nn import EGAB, ESAB, SGDB, Conv2d, Downsample, Module, Upsample
from adnet.tensor import OptimizerState, Tensor, concatenate, no_grad

EG_RESTORMER = "eg_restormer"
LENET = "lenet"
LEVELS = 4
SIZE_MULTIPLE = 2 ** (LEVELS - 1)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = LENET
    base_channels: int = 8
    blocks_per_level: tuple = (1, 1, 1, 1)
    heads_per_level: tuple = (1, 1, 2, 2)
    ffn_expansion: float = 2.0
    sgdb_expansion: int = 1
    sgdb_gamma_init: float = 1.0
    in_channels: int = 3
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_level", tuple(int(b) for b in self.blocks_per_level))
        object.__setattr__(self, "heads_per_level", tuple(int(h) for h in self.heads_per_level))
        if self.kind not in (EG_RESTORMER, LENET):
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if len(self.blocks_per_level) != LEVELS or len(self.heads_per_level) != LEVELS:
            raise ParameterError(f"exactly {LEVELS} levels are required")
        if self.base_channels < 1 or any(b < 1 for b in self.blocks_per_level):
            raise ParameterError("channel and block counts must be positive")
        if self.kind == EG_RESTORMER:
            for level, heads in enumerate(self.heads_per_level):
                ch = self.channels(level)
                if heads < 1 or ch % heads:
                    raise ParameterError(f"level {level}: {heads} heads do not divide {ch} channels")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks_per_level"] = list(self.blocks_per_level)
        d["heads_per_level"] = list(self.heads_per_level)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ParameterError(f"unknown model config fields: {unknown}")
        return cls(**data)


def full_eg_restormer() -> ModelConfig:
    return ModelConfig(kind=EG_RESTORMER, base_channels=48, blocks_per_level=(4, 6, 6, 8),
                       heads_per_level=(1, 2, 4, 8), ffn_expansion=2.66)


def desk_eg_restormer() -> ModelConfig:
    return ModelConfig(kind=EG_RESTORMER, base_channels=8, blocks_per_level=(1, 1, 1, 1),
                       heads_per_level=(1, 1, 2, 2))


def full_lenet() -> ModelConfig:
    return ModelConfig(kind=LENET, base_channels=16, blocks_per_level=(2, 2, 2, 2))


def desk_lenet() -> ModelConfig:
    return ModelConfig(kind=LENET, base_channels=8, blocks_per_level=(1, 1, 1, 1))


PRESETS = {
    "full-eg-restormer": full_eg_restormer,
    "desk-eg-restormer": desk_eg_restormer,
    "full-lenet": full_lenet,
    "desk-lenet": desk_lenet,
}


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class UNetRestorer(Module):
    """Shared four-level U-net skeleton; subclasses choose the block type."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        c = config.channels
        self.intro = Conv2d(config.in_channels, c(0), 3, rng=rng)
        self.encoders = [self._stage(lvl, rng) for lvl in range(LEVELS - 1)]
        self.downs = [Downsample(c(lvl), rng=rng) for lvl in range(LEVELS - 1)]
        self.latent = self._stage(LEVELS - 1, rng)
        self.ups = [Upsample(c(lvl + 1), rng=rng) for lvl in reversed(range(LEVELS - 1))]
        self.reduces = [Conv2d(2 * c(lvl), c(lvl), 1, bias=False, rng=rng) for lvl in reversed(range(LEVELS - 1))]
        self.decoders = [self._stage(lvl, rng) for lvl in reversed(range(LEVELS - 1))]
        self.refine = self._refinement(rng)
        self.output = Conv2d(c(0), config.in_channels, 3, rng=rng)

    def _make_block(self, level: int, rng) -> Module:
        raise NotImplementedError

    def _refinement(self, rng):
        return None

    def _stage(self, level: int, rng) -> Sequential:
        return Sequential(*[self._make_block(level, rng) for _ in range(self.config.blocks_per_level[level])])

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(f"expected N x {self.config.in_channels} x H x W input, got {x.shape}")
        h, w = x.shape[2:]
        if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
            raise DimensionError(f"spatial extents {h}x{w} must be divisible by {SIZE_MULTIPLE}; "
                                 "use restore() to pad automatically")

    def encoder_features(self, x: Tensor) -> list:
        """Encoder outputs at every level, the last one being the bottleneck."""
        self._check(x)
        feats = []
        h = self.intro(x)
        for enc, down in zip(self.encoders, self.downs):
            h = enc(h)
            feats.append(h)
            h = down(h)
        feats.append(self.latent(h))
        return feats

    def forward(self, x: Tensor, drop_skip: int | None = None) -> Tensor:
        """NCHW forward pass. ``drop_skip`` zeroes one encoder level's skip input."""
        feats = self.encoder_features(x)
        skips, h = feats[:-1], feats[-1]
        for up, reduce, dec, level in zip(self.ups, self.reduces, self.decoders, reversed(range(LEVELS - 1))):
            skip = skips[level]
            if drop_skip == level:
                skip = Tensor(np.zeros_like(skip.data))
            h = dec(reduce(concatenate([up(h), skip], axis=1)))
        if self.refine is not None:
            h = self.refine(h)
        return (x + self.output(h)).clip(0.0, 1.0)

    def restore(self, image: np.ndarray) -> np.ndarray:
        """Restore one H x W x C image in [0, 1], reflect-padding to a multiple of 8."""
        image = np.asarray(image)
        if image.ndim != 3:
            raise DimensionError(f"expected an H x W x C image, got shape {image.shape}")
        h, w, _ = image.shape
        ph, pw = (-h) % SIZE_MULTIPLE, (-w) % SIZE_MULTIPLE
        dtype = self.parameters()[0].dtype
        arr = image.astype(dtype)
        if ph or pw:
            arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="reflect")
        with no_grad():
            out = self.forward(Tensor(arr.transpose(2, 0, 1)[None]))
        return np.ascontiguousarray(out.data[0].transpose(1, 2, 0)[:h, :w])



class EGRestormer(UNetRestorer):
    def _make_block(self, level, rng):
        cfg = self.config
        return EGAB(cfg.channels(level), cfg.heads_per_level[level], cfg.ffn_expansion, rng=rng)


class LENet(UNetRestorer):
    def _make_block(self, level, rng):
        cfg = self.config
        return SGDB(cfg.channels(level), cfg.sgdb_expansion, cfg.sgdb_gamma_init, rng=rng)

    def _refinement(self, rng):
        return ESAB(self.config.base_channels, rng=rng)


def build_model(config: ModelConfig) -> UNetRestorer:
    return EGRestormer(config) if config.kind == EG_RESTORMER else LENet(config)


def eg_restormer_forward(image: np.ndarray, model: EGRestormer) -> np.ndarray:
    return model.restore(image)


def lenet_forward(image: np.ndarray, model: LENet) -> np.ndarray:
    return model.restore(image)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"ADNETCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")  # magic, version, header byte length


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    step: int = 0
    optimizer: OptimizerState | None = None
    extra: dict = field(default_factory=dict)

    def build(self) -> UNetRestorer:
        model = build_model(self.config)
        model.load_state_dict(self.params)
        return model


def save_checkpoint(model: UNetRestorer, path, step: int = 0, optimizer: OptimizerState | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    tensors = list(model.state_dict().items())
    opt_meta = None
    if optimizer is not None:
        opt_meta = {"t": optimizer.t, "learning_rate": optimizer.learning_rate, "beta1": optimizer.beta1,
                    "beta2": optimizer.beta2, "eps": optimizer.eps, "weight_decay": optimizer.weight_decay,
                    "count": len(optimizer.m)}
        tensors += [(f"optimizer.m.{i}", m) for i, m in enumerate(optimizer.m)]
        tensors += [(f"optimizer.v.{i}", v) for i, v in enumerate(optimizer.v)]

    directory, chunks, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    header = {
        "config": model.config.to_dict(),
        "step": int(step),
        "optimizer": opt_meta,
        "tensors": directory,
        "data_nbytes": len(data),
        "data_crc32": zlib.crc32(data),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(data)
    tmp.replace(path)
    return path


def _config_diff(expected: ModelConfig, found: ModelConfig) -> str | None:
    for f in fields(ModelConfig):
        if getattr(expected, f.name) != getattr(found, f.name):
            return f.name
    return None


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise FormatError("file too short for checkpoint prefix", offset=len(blob))
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError("bad magic bytes, not an ADNet checkpoint", offset=0)
    if version != FORMAT_VERSION:
        raise IncompatibleError(f"checkpoint format version {version} is not supported "
                                f"(this build reads version {FORMAT_VERSION})", field="format_version")
    start = _PREFIX.size
    if start + hlen > len(blob):
        raise FormatError(f"header of {hlen} bytes truncated", offset=len(blob))
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparseable header: {exc}", offset=start) from exc
    data_start = start + hlen
    data = blob[data_start:]
    if len(data) != header.get("data_nbytes"):
        raise FormatError(f"tensor data is {len(data)} bytes, header declares {header.get('data_nbytes')}",
                          offset=len(blob))
    if zlib.crc32(data) != header.get("data_crc32"):
        raise FormatError("tensor data checksum mismatch", offset=data_start)

    try:
        config = ModelConfig.from_dict(header["config"])
    except (ParameterError, TypeError, KeyError) as exc:
        raise FormatError(f"invalid model config in header: {exc}", offset=start) from exc
    if expected_config is not None:
        diff = _config_diff(expected_config, config)
        if diff is not None:
            raise IncompatibleError(f"checkpoint config differs in field {diff!r}: expected "
                                    f"{getattr(expected_config, diff)!r}, found {getattr(config, diff)!r}",
                                    field=diff)

    arrays = OrderedDict()
    for entry in header["tensors"]:
        off, nbytes = entry["offset"], entry["nbytes"]
        if off + nbytes > len(data):
            raise FormatError(f"tensor {entry['name']!r} extends past end of data", offset=data_start + off)
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=off)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)

    optimizer = None
    meta = header.get("optimizer")
    if meta:
        optimizer = OptimizerState(learning_rate=meta["learning_rate"], beta1=meta["beta1"], beta2=meta["beta2"],
                                   eps=meta["eps"], weight_decay=meta["weight_decay"], t=meta["t"])
        optimizer.m = [arrays.pop(f"optimizer.m.{i}") for i in range(meta["count"])]
        optimizer.v = [arrays.pop(f"optimizer.v.{i}") for i in range(meta["count"])]

    ckpt = Checkpoint(config=config, params=arrays, step=header["step"], optimizer=optimizer,
                      extra=header.get("extra", {}))
    try:
        build_model(config).load_state_dict(arrays)
    except DimensionError as exc:
        raise IncompatibleError(f"tensor directory does not match the declared config: {exc}",
                                field="tensors") from exc
    return ckpt


def checkpoint_save(model, path, **kwargs) -> Path:
    return save_checkpoint(model, path, **kwargs)


def checkpoint_load(path, expected_config: ModelConfig | None = None) -> UNetRestorer:
    return load_checkpoint(path, expected_config).build()
