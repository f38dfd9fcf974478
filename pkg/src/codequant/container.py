"""Single-file model container.

Layout (all integers little-endian):

    magic "CQM1" | u32 version=1 | u64 text_len | config text | u32 n_tensors
    then per tensor, in ascending name order:
    u32 name_len | name utf-8 | u8 dtype | u32 ndim | u64 dims... | payload

Config text is sorted "key = value" lines, one per line, trailing newline.
dtype codes: 0 = float32, 1 = packed 4-bit ids (low nibble first), 2 = int8.
Clustered sites serialize "<site>.centroids" (float32, d_out x n_groups x K)
and "<site>.ids" (packed, d_out x d_in) instead of the dense weight, so the
container stores the compressed form. save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigError, FormatError
from .model import (DecoderLayerWeights, ModelConfig, ModelWeights,
                    codebook_to_dense, site_path)
from .quant import pack_nibbles, unpack_nibbles

MAGIC = b"CQM1"
VERSION = 1

DTYPE_F32 = 0
DTYPE_NIBBLE = 1
DTYPE_INT8 = 2

_MAX_NDIM = 8

_CONFIG_KEYS = {
    "d_model": "d_model",
    "n_heads": "n_heads",
    "d_ff": "d_ff",
    "experts": "n_experts",
    "top_k": "top_k",
    "layers": "n_layers",
    "calib_tokens": "n_calib",
    "seed": "seed",
}


def _encode_tensor(name: str, code: int, arr: np.ndarray) -> bytes:
    if code == DTYPE_F32:
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    elif code == DTYPE_NIBBLE:
        payload = pack_nibbles(np.ascontiguousarray(arr).reshape(-1))
    elif code == DTYPE_INT8:
        payload = np.ascontiguousarray(arr, dtype=np.int8).tobytes()
    else:
        raise FormatError(f"unknown dtype code {code} for tensor {name!r}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<I", len(raw_name)) + raw_name
    head += struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + payload


def write_container(path: str, config: dict, tensors: dict) -> None:
    """tensors: name -> (dtype code, ndarray)."""
    lines = [f"{k} = {config[k]}" for k in sorted(config)]
    text = ("\n".join(lines) + "\n").encode("utf-8") if lines else b""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", len(text))
    blob += text
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        code, arr = tensors[name]
        blob += _encode_tensor(name, code, arr)
    with open(path, "wb") as f:
        f.write(blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated container while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def read_container(path: str):
    """Returns (config dict, tensors dict name -> (dtype code, ndarray)).

    Packed-nibble tensors come back as uint8 arrays of ids in 0..15.
    """
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a model container")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    text_len = r.u64("config length")
    text = r.take(text_len, "config text")
    try:
        decoded = text.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"config text is not valid UTF-8: {exc}") from None
    config = {}
    for ln, line in enumerate(decoded.splitlines()):
        if " = " not in line:
            raise FormatError(f"malformed config line {ln + 1}: {line!r}")
        key, value = line.split(" = ", 1)
        if key in config:
            raise FormatError(f"duplicate config key {key!r}")
        config[key] = value
    n_tensors = r.u32("tensor count")
    tensors = {}
    for _ in range(n_tensors):
        name_len = r.u32("tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        code = r.u8(f"dtype of tensor {name!r}")
        ndim = r.u32(f"rank of tensor {name!r}")
        if ndim > _MAX_NDIM:
            raise FormatError(f"tensor {name!r} rank {ndim} exceeds {_MAX_NDIM}")
        dims = tuple(r.u64(f"dims of tensor {name!r}") for _ in range(ndim))
        numel = 1
        for d in dims:
            numel *= d
        if code == DTYPE_F32:
            raw = r.take(4 * numel, f"payload of tensor {name!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(dims)
        elif code == DTYPE_NIBBLE:
            raw = r.take((numel + 1) // 2, f"payload of tensor {name!r}")
            arr = unpack_nibbles(raw, numel).reshape(dims)
        elif code == DTYPE_INT8:
            raw = r.take(numel, f"payload of tensor {name!r}")
            arr = np.frombuffer(raw, dtype=np.int8).reshape(dims)
        else:
            raise FormatError(f"tensor {name!r} has unknown dtype code {code}")
        tensors[name] = (code, arr.copy())
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return config, tensors


# ---------------------------------------------------------------------------
# Model-level save / load


def save_model(w: ModelWeights, path: str) -> None:
    cfg = w.config
    config = {key: str(getattr(cfg, attr)) for key, attr in _CONFIG_KEYS.items()}
    for key, value in w.metadata.items():
        config[f"meta.{key}"] = value
    tensors = {}

    def put(name: str, arr: np.ndarray) -> None:
        if name in w.codebooks:
            centroids, ids, _ = w.codebooks[name]
            tensors[name + ".centroids"] = (DTYPE_F32, centroids)
            tensors[name + ".ids"] = (DTYPE_NIBBLE, ids)
        else:
            tensors[name] = (DTYPE_F32, arr)

    for li, layer in enumerate(w.layers):
        tensors[site_path(li, "norm1")] = (DTYPE_F32, layer.a1)
        tensors[site_path(li, "norm2")] = (DTYPE_F32, layer.a2)
        put(site_path(li, "q"), layer.w_q)
        put(site_path(li, "k"), layer.w_k)
        put(site_path(li, "v"), layer.w_v)
        put(site_path(li, "out"), layer.w_out)
        tensors[site_path(li, "router")] = (DTYPE_F32, layer.w_router)
        for e in range(cfg.n_experts):
            put(site_path(li, "gate", e), layer.w_gate[e])
            put(site_path(li, "up", e), layer.w_up[e])
            put(site_path(li, "down", e), layer.w_down[e])
    write_container(path, config, tensors)


def _parse_int(config: dict, key: str) -> int:
    if key not in config:
        raise FormatError(f"config key {key!r} missing from container")
    try:
        return int(config[key])
    except ValueError:
        raise FormatError(f"config key {key!r} is not an integer: "
                          f"{config[key]!r}") from None


def load_model(path: str, dtype=np.float64) -> ModelWeights:
    config, tensors = read_container(path)
    kwargs = {attr: _parse_int(config, key) for key, attr in _CONFIG_KEYS.items()}
    try:
        cfg = ModelConfig(**kwargs)
    except ConfigError as exc:
        raise FormatError(f"invalid model config in container: {exc}") from None
    metadata = {k[len("meta."):]: v for k, v in config.items()
                if k.startswith("meta.")}
    unknown = set(config) - set(_CONFIG_KEYS) - {
        k for k in config if k.startswith("meta.")}
    if unknown:
        raise FormatError(f"unknown config keys: {sorted(unknown)}")

    remaining = dict(tensors)
    codebooks = {}

    def grab(name: str, expect_shape=None) -> np.ndarray:
        if name in remaining:
            code, arr = remaining.pop(name)
            if code != DTYPE_F32:
                raise FormatError(f"tensor {name!r} has unexpected dtype code {code}")
            out = np.ascontiguousarray(arr, dtype=dtype)
        elif name + ".centroids" in remaining:
            ccode, centroids = remaining.pop(name + ".centroids")
            key_ids = name + ".ids"
            if key_ids not in remaining:
                raise FormatError(f"tensor {key_ids!r} missing from container")
            icode, ids = remaining.pop(key_ids)
            if ccode != DTYPE_F32 or icode != DTYPE_NIBBLE:
                raise FormatError(f"clustered site {name!r} has wrong dtype codes")
            if centroids.ndim != 3 or ids.ndim != 2:
                raise FormatError(f"clustered site {name!r} has wrong ranks")
            d_out, n_groups, _ = centroids.shape
            if ids.shape[0] != d_out or n_groups == 0 or ids.shape[1] % n_groups:
                raise FormatError(f"clustered site {name!r} shape mismatch")
            group_size = ids.shape[1] // n_groups
            codebooks[name] = (centroids, ids, group_size)
            out = codebook_to_dense(centroids, ids, group_size).astype(dtype)
        else:
            raise FormatError(f"tensor {name!r} missing from container")
        if expect_shape is not None and out.shape != expect_shape:
            raise FormatError(f"tensor {name!r} has shape {out.shape}, "
                              f"expected {expect_shape}")
        return out

    d, ff, ne = cfg.d_model, cfg.d_ff, cfg.n_experts
    layers = []
    for li in range(cfg.n_layers):
        layers.append(DecoderLayerWeights(
            a1=grab(site_path(li, "norm1"), (d,)),
            a2=grab(site_path(li, "norm2"), (d,)),
            w_q=grab(site_path(li, "q"), (d, d)),
            w_k=grab(site_path(li, "k"), (d, d)),
            w_v=grab(site_path(li, "v"), (d, d)),
            w_out=grab(site_path(li, "out"), (d, d)),
            w_router=grab(site_path(li, "router"), (d, ne)),
            w_gate=[grab(site_path(li, "gate", e), (d, ff)) for e in range(ne)],
            w_up=[grab(site_path(li, "up", e), (d, ff)) for e in range(ne)],
            w_down=[grab(site_path(li, "down", e), (ff, d)) for e in range(ne)],
        ))
    if remaining:
        raise FormatError(f"unexpected tensors: {sorted(remaining)}")
    return ModelWeights(cfg, layers, metadata, codebooks)
