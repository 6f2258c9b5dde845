"""Cell-to-token conversion, the block stack, the classification head, the
training loss, and checkpoint persistence.

Checkpoint container (versioned, round-trips bit-exact): a UTF-8 text header
holding the format version, the model config as key=value lines, optional
extra key=value metadata, and a parameter manifest (name, shape, byte
offset), followed by a ``[blob]`` marker and the raw little-endian float64
buffers in manifest order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import blocks as B
from . import layers as L
from .autodiff import Tensor
from .blocks import ModelConfig

CHECKPOINT_MAGIC = "UAM-CHECKPOINT v1"


class CheckpointError(ValueError):
    """Malformed checkpoint or config/manifest mismatch."""


@dataclass
class CellTokenBatch:
    tokens: np.ndarray   # [B, T, token_chunk]
    labels: np.ndarray   # [B] class indices
    lengths: np.ndarray  # [B], all equal T after padding


def tokenize_cell(features: np.ndarray, token_chunk: int) -> np.ndarray:
    """Zero-pad F features to a multiple of token_chunk, reshape row-major
    into [T, token_chunk] with T = ceil(F / token_chunk)."""
    f = np.asarray(features, dtype=np.float64).reshape(-1)
    T = -(-f.size // token_chunk)
    padded = np.zeros(T * token_chunk)
    padded[: f.size] = f
    return padded.reshape(T, token_chunk)


def tokenize_features(features: np.ndarray, token_chunk: int) -> np.ndarray:
    """Vectorized tokenize_cell over [N, F] -> [N, T, token_chunk]."""
    feats = np.asarray(features, dtype=np.float64)
    n, f = feats.shape
    T = -(-f // token_chunk)
    padded = np.zeros((n, T * token_chunk))
    padded[:, :f] = feats
    return padded.reshape(n, T, token_chunk)


def make_batch(features: np.ndarray, labels: np.ndarray, token_chunk: int) -> CellTokenBatch:
    tokens = tokenize_features(features, token_chunk)
    labels = np.asarray(labels, dtype=np.int64)
    lengths = np.full(len(labels), tokens.shape[1], dtype=np.int64)
    return CellTokenBatch(tokens=tokens, labels=labels, lengths=lengths)


# -- model ----------------------------------------------------------------------

@dataclass
class ClassifierModel:
    config: ModelConfig
    lift: L.LinearParams       # [token_chunk -> d_model]
    blocks: list
    head: L.LinearParams       # [d_model -> n_classes]


def build_model(config: ModelConfig, seed: int = 0) -> ClassifierModel:
    rng = np.random.default_rng(seed)
    lift = L.linear_init(rng, config.token_chunk, config.d_model)
    blocks = B.build_blocks(config, rng)
    head = L.linear_init(rng, config.d_model, config.n_classes)
    return ClassifierModel(config=config, lift=lift, blocks=blocks, head=head)


def positional_encoding(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def forward_features(model: ClassifierModel, tokens: np.ndarray) -> tuple[Tensor, Tensor]:
    """Lift tokens, run the block stack, mean-pool over tokens.

    Returns (pooled [B, d_model], summed aux loss).
    """
    x = L.linear_forward(Tensor(np.asarray(tokens, dtype=np.float64)), model.lift)
    if model.config.use_positions:
        x = ad.add(x, Tensor(positional_encoding(x.shape[-2], x.shape[-1])))
    aux = Tensor(0.0)
    for block in model.blocks:
        x, a = B.block_forward(x, block)
        aux = ad.add(aux, a)
    pooled = ad.tmean(x, axis=-2)
    return pooled, aux


def forward_classify(model: ClassifierModel, tokens: np.ndarray) -> tuple[Tensor, Tensor]:
    """Logits [B, n_classes] plus accumulated MoE aux loss."""
    pooled, aux = forward_features(model, tokens)
    return L.linear_forward(pooled, model.head), aux


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, aux_loss: Tensor | None = None) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], plus aux losses.

    Computed via a detached-max log-sum-exp, so arbitrarily large logits are
    safe and the gradient is exactly softmax - onehot.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels outside 0..{k - 1}")
    shift = ad.sub(logits, Tensor(logits.data.max(axis=-1, keepdims=True)))
    lse = ad.tlog(ad.tsum(ad.texp(shift), axis=-1, keepdims=True))
    logp = ad.sub(shift, lse)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.tsum(ad.mul(logp, Tensor(onehot)), axis=-1)
    loss = ad.neg(ad.tmean(picked))
    if aux_loss is not None:
        loss = ad.add(loss, aux_loss)
    return loss


def named_parameters(model) -> list[tuple[str, Tensor]]:
    return B.named_parameters(model)


# -- checkpoint persistence ----------------------------------------------------------

_CONFIG_FIELDS = [f.name for f in dataclasses.fields(ModelConfig)]


def _config_lines(config: ModelConfig) -> list[str]:
    return [f"{name}={getattr(config, name)}" for name in _CONFIG_FIELDS]


def _parse_config(kv: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        raw = kv[f.name]
        if f.name == "variant":
            kwargs[f.name] = raw
        elif f.name == "use_positions":
            kwargs[f.name] = raw == "True"
        elif f.name in ("jamba_attn_ratio", "load_balance_coeff"):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    return ModelConfig(**kwargs)


def write_container(path, config_lines, extra_config, entries) -> None:
    """Write the versioned container: text header (config, extra, manifest)
    followed by little-endian float64 blobs in manifest order."""
    header = [CHECKPOINT_MAGIC, "[config]"]
    header.extend(config_lines)
    header.append("[extra]")
    for key, value in (extra_config or {}).items():
        if "\n" in key or "\n" in str(value):
            raise CheckpointError(f"extra config entry {key!r} contains a newline")
        header.append(f"{key}={value}")
    header.append("[manifest]")
    offset = 0
    blobs = []
    for name, arr in entries:
        arr = np.asarray(arr, dtype=np.float64)
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        header.append(f"{name}\t{shape}\t{offset}")
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        blobs.append(raw)
        offset += len(raw)
    header.append("[blob]")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for raw in blobs:
            fh.write(raw)


def read_container(path):
    """Inverse of write_container; returns (config_kv, extra_config, arrays)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = b"[blob]\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointError(f"{path}: missing [blob] marker")
    text = raw[:cut].decode("utf-8").splitlines()
    blob = raw[cut + len(marker):]
    if not text or text[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic (expected {CHECKPOINT_MAGIC!r})")

    section = None
    config_kv: dict[str, str] = {}
    extra_config: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    for line in text[1:]:
        if line in ("[config]", "[extra]", "[manifest]"):
            section = line
            continue
        if section == "[config]":
            key, _, value = line.partition("=")
            config_kv[key] = value
        elif section == "[extra]":
            key, _, value = line.partition("=")
            extra_config[key] = value
        elif section == "[manifest]":
            name, shape_s, offset_s = line.split("\t")
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=int(offset_s))
            arrays[name] = np.array(arr.reshape(shape), dtype=np.float64)
    return config_kv, extra_config, arrays


def load_params_from(arrays: dict, named, prefix: str, where: str) -> None:
    """Copy manifest arrays into a parameter tree, validating the dimension
    manifest name-by-name and shape-by-shape."""
    params = {f"{prefix}{n}": t for n, t in named}
    seen = set()
    for name, arr in arrays.items():
        if not name.startswith(prefix):
            continue
        if name not in params:
            raise CheckpointError(f"{where}: unknown parameter {name!r} in manifest")
        t = params[name]
        if t.shape != arr.shape:
            raise CheckpointError(
                f"{where}: shape mismatch for {name!r}: checkpoint {arr.shape} vs config {t.shape}"
            )
        t.data = arr
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{where}: manifest missing parameters: {sorted(missing)[:3]} ...")


def save_checkpoint(
    path,
    model: ClassifierModel,
    extra_config: dict[str, str] | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    """Write a classifier checkpoint (see module docstring for the format)."""
    entries = [(f"model.{name}", t.data) for name, t in named_parameters(model)]
    for name, arr in (extra_arrays or {}).items():
        entries.append((f"extra.{name}", np.asarray(arr, dtype=np.float64)))
    write_container(path, _config_lines(model.config), extra_config, entries)


def load_checkpoint(path):
    """Read a checkpoint; returns (model, extra_config, extra_arrays).

    The manifest is checked against a model freshly built from the stored
    config; any name or shape mismatch is a CheckpointError.
    """
    config_kv, extra_config, arrays = read_container(path)
    try:
        config = _parse_config(config_kv)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config section ({exc})") from None
    model = build_model(config, seed=0)
    load_params_from(arrays, named_parameters(model), "model.", str(path))
    extra_arrays = {
        name.removeprefix("extra."): arr for name, arr in arrays.items() if name.startswith("extra.")
    }
    return model, extra_config, extra_arrays
