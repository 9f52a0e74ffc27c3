"""Versioned checkpoint files and the flat ``key = value`` run configuration."""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .data import NormalizationState
from .errors import ConfigError, ContractError, IngestionError
from .model import ModelConfig, ModelParameters, param_shapes
from .optim import AdamConfig
from .sampling import DEFAULT_ALPHA, DEFAULT_K, DEFAULT_STEPS
from .tensor import Tensor
from .training import TrainConfig

MAGIC = b"FMTSCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")  # magic, version, manifest byte length


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: ModelParameters
    normalization: Optional[NormalizationState] = None
    step: int = 0
    rng_state: Optional[dict] = None
    channel_names: Optional[list] = None

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return {"__uint64__": [int(v) for v in obj.ravel()]} if obj.dtype == np.uint64 else obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__uint64__"}:
            return np.array(obj["__uint64__"], dtype=np.uint64)
        return {k: _from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_jsonable(v) for v in obj]
    return obj


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Serialize to bytes: header, JSON manifest, then float32 little-endian arrays in manifest order."""
    norm = None
    if ckpt.normalization is not None:
        norm = {"min": [float(v) for v in ckpt.normalization.minimum],
                "max": [float(v) for v in ckpt.normalization.maximum]}
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.config.to_dict(),
        "normalization": norm,
        "step": int(ckpt.step),
        "rng_state": _jsonable(ckpt.rng_state),
        "channel_names": ckpt.channel_names,
        "params": [{"name": k, "shape": list(t.shape)} for k, t in ckpt.params.items()],
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(text)), text]
    for _, t in ckpt.params.items():
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < _HEADER.size:
        raise ContractError(f"{source}: too short to be a checkpoint")
    magic, version, mlen = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ContractError(f"{source}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise ContractError(f"{source}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    start = _HEADER.size
    try:
        manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContractError(f"{source}: corrupt manifest ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"{source}: manifest version {manifest.get('format_version')} does not match header")
    config = ModelConfig(**manifest["model_config"]).validate()
    offset = start + mlen
    tensors = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(blob):
            raise ContractError(f"{source}: truncated at parameter {entry['name']!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = Tensor(arr.astype(np.float32), requires_grad=True)
        offset = end
    if offset != len(blob):
        raise ContractError(f"{source}: {len(blob) - offset} trailing bytes after the last parameter")
    expected = param_shapes(config)
    if list(expected) != list(tensors):
        raise ContractError(f"{source}: parameter list does not match the stored model config")
    norm = manifest.get("normalization")
    normalization = None if norm is None else NormalizationState(norm["min"], norm["max"])
    return Checkpoint(ModelParameters(config, tensors), normalization, int(manifest["step"]),
                      _from_jsonable(manifest.get("rng_state")), manifest.get("channel_names"))


def atomic_write(path, payload: bytes):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt: Checkpoint):
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    return decode_checkpoint(blob, str(path))


# --------------------------------------------------------------------------
# run configuration


@dataclass
class DatasetSpec:
    """Where training windows come from: a generator or a CSV file."""

    kind: str = "sines"  # sines | ar1 | csv
    n: int = 2048
    length: int = 24
    channels: int = 5
    phi: float = 0.8
    path: Optional[str] = None
    stride: int = 1

    def validate(self):
        if self.kind not in ("sines", "ar1", "csv"):
            raise ConfigError(f"dataset.kind must be sines, ar1 or csv, got {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("dataset.path is required when dataset.kind = csv")
        for name in ("n", "length", "channels", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dataset.{name} must be >= 1")
        if self.kind == "ar1" and not abs(self.phi) < 1:
            raise ConfigError("dataset.phi must satisfy |phi| < 1")
        return self


@dataclass
class SamplerDefaults:
    steps: int = DEFAULT_STEPS
    alpha: float = DEFAULT_ALPHA
    k: float = DEFAULT_K

    def validate(self):
        if self.steps < 1:
            raise ConfigError("sample.steps must be >= 1")
        if not self.alpha >= 1:
            raise ConfigError("sample.alpha must be >= 1")
        if not self.k > 0:
            raise ConfigError("sample.k must be > 0")
        return self


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerDefaults = field(default_factory=SamplerDefaults)
    output_dir: str = "."
    seed: Optional[int] = None

    def validate(self) -> "RunConfig":
        if self.seed is None:
            raise ConfigError("seed is required (no wall-clock seeding)")
        self.dataset.validate()
        self.model.validate()
        self.train.validate()
        self.sampler.validate()
        return self


def _coerce(key, raw, typ):
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ == "optional_str":
            return None if raw.lower() in ("none", "") else raw
        if typ == "optional_float":
            return None if raw.lower() in ("none", "off", "") else float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _field_types(cls):
    hints = {"int": int, "float": float, "str": str, "bool": bool,
             "Optional[float]": "optional_float", "Optional[str]": "optional_str"}
    return {f.name: hints.get(f.type if isinstance(f.type, str) else f.type.__name__, str) for f in fields(cls)}


# section name -> (dataclass, attribute on RunConfig or nested path)
_SECTIONS = {
    "dataset": DatasetSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "optimizer": AdamConfig,
    "sample": SamplerDefaults,
}


def config_keys() -> list:
    """Every accepted key, in documentation order."""
    keys = ["seed", "output.dir"]
    for section, cls in _SECTIONS.items():
        for name in _field_types(cls):
            if cls is TrainConfig and name in ("optimizer", "seed"):
                continue
            if cls is ModelConfig and name in ("series_length", "channels"):
                continue  # taken from the dataset
            keys.append(f"{section}.{name}")
    return keys


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Model window shape comes from ``dataset.length`` / ``dataset.channels``
    (for CSV data the channel count is read from the file later).
    """
    allowed = set(config_keys())
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = raw

    sections = {name: {} for name in _SECTIONS}
    for key, raw in values.items():
        if "." not in key or key == "output.dir":
            continue
        section, name = key.split(".", 1)
        sections[section][name] = _coerce(key, raw, _field_types(_SECTIONS[section])[name])

    seed = _coerce("seed", values["seed"], int) if "seed" in values else None
    dataset = DatasetSpec(**sections["dataset"])
    model = ModelConfig(series_length=dataset.length, channels=dataset.channels, **sections["model"])
    optimizer = AdamConfig(**sections["optimizer"])
    train = TrainConfig(optimizer=optimizer, seed=seed if seed is not None else 0, **sections["train"])
    sampler = SamplerDefaults(**sections["sample"])
    out = values.get("output.dir") or os.environ.get("FMTS_OUTPUT_DIR") or "."
    return RunConfig(dataset, model, train, sampler, out, seed).validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config_text(text, str(path))


def format_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config_text` (every key written explicitly)."""
    lines = [f"seed = {cfg.seed}", f"output.dir = {cfg.output_dir}"]
    objs = {"dataset": cfg.dataset, "model": cfg.model, "train": cfg.train,
            "optimizer": cfg.train.optimizer, "sample": cfg.sampler}
    for key in config_keys()[2:]:
        section, name = key.split(".", 1)
        value = getattr(objs[section], name)
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
