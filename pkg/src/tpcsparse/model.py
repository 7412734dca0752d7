"""Sparse ResNet14 encoder with an explicit backward pass.

Layout (defaults)::

    stem      3^3 conv s2 -> BN -> ReLU -> 2^3 max pool
    stage 1-4 BasicBlock(s) each opening with stride 2, 1^3 conv + BN shortcut
    pre-pool  dropout -> 3^3 conv s3 -> BN -> GELU
    pool      global max pool            (the embedding)
    head      linear                      (the logits)

With one BasicBlock per stage this is ten 3^3 convolutions and one linear
layer.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import layers as L
from .errors import CheckpointError, ConfigError, EmptyEvent
from .sparse import SparseTensor, batch, build_kernel_map, pool_map

DEFAULT_WIDTHS = (64, 128, 256, 512)
SMALL_WIDTHS = (16, 32, 64, 128)


@dataclass
class ArchConfig:
    in_channels: int = 4
    stage_widths: tuple[int, int, int, int] = DEFAULT_WIDTHS
    blocks_per_stage: int = 1
    head_classes: int = 2
    dropout_p: float = 0.8
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if len(self.stage_widths) != 4 or min(self.stage_widths) <= 0:
            raise ConfigError(f"stage_widths must be 4 positive ints, got {self.stage_widths}")
        if self.blocks_per_stage not in (1, 2):
            raise ConfigError("blocks_per_stage must be 1 or 2")
        if self.in_channels <= 0 or self.head_classes <= 0:
            raise ConfigError("in_channels and head_classes must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def small(cls, **kw) -> "ArchConfig":
        return cls(stage_widths=SMALL_WIDTHS, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ArchConfig keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def embed_dim(self) -> int:
        return self.stage_widths[-1]


def block_specs(cfg: ArchConfig):
    """``(name, c_in, c_out, stride, has_downsample)`` for every BasicBlock."""
    specs = []
    c_in = cfg.stage_widths[0]
    for s, width in enumerate(cfg.stage_widths):
        for m in range(cfg.blocks_per_stage):
            stride = 2 if m == 0 else 1
            specs.append((f"stage{s + 1}.block{m + 1}", c_in, width, stride, stride != 1 or c_in != width))
            c_in = width
    return specs


def param_shapes(cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    w0 = cfg.stage_widths[0]
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, k, ci, co):
        shapes[f"{name}.W"] = (k, ci, co)

    def bn(name, c):
        shapes[f"{name}.gamma"] = (c,)
        shapes[f"{name}.beta"] = (c,)

    conv("stem.conv", 27, cfg.in_channels, w0)
    bn("stem.bn", w0)
    for name, ci, co, _, down in block_specs(cfg):
        conv(f"{name}.conv1", 27, ci, co)
        bn(f"{name}.bn1", co)
        conv(f"{name}.conv2", 27, co, co)
        bn(f"{name}.bn2", co)
        if down:
            conv(f"{name}.down.conv", 1, ci, co)
            bn(f"{name}.down.bn", co)
    d = cfg.embed_dim
    conv("prepool.conv", 27, d, d)
    bn("prepool.bn", d)
    shapes["head.W"] = (d, cfg.head_classes)
    shapes["head.b"] = (cfg.head_classes,)
    return shapes


def count_convs(cfg: ArchConfig, include_downsample: bool = False) -> int:
    return sum(
        1 for n, s in param_shapes(cfg).items()
        if n.endswith(".W") and len(s) == 3 and (include_downsample or s[0] == 27)
    )


@dataclass
class ModelState:
    config: ArchConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def bn(self, name: str) -> L.BNParams:
        return L.BNParams(
            self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"],
        )

    def copy(self) -> "ModelState":
        return ModelState(
            ArchConfig.from_dict(asdict(self.config)),
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            json.loads(json.dumps(self.meta)),
        )


def init(config: ArchConfig, mode: str = "random", path: str | os.PathLike | None = None) -> ModelState:
    """``random``: Kaiming fan-in normal weights, BN gamma=1/beta=0, seeded by ``config.seed``."""
    if mode == "from_checkpoint":
        if path is None:
            raise CheckpointError("from_checkpoint needs a path")
        state = load_checkpoint(path)
        if asdict(state.config) != asdict(config):
            raise CheckpointError(
                f"checkpoint config {asdict(state.config)} does not match requested {asdict(config)}"
            )
        return state
    if mode != "random":
        raise ValueError(f"unknown init mode {mode!r}")
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype)
            base = name[: -len(".gamma")]
            buffers[f"{base}.running_mean"] = np.zeros(shape, dtype)
            buffers[f"{base}.running_var"] = np.ones(shape, dtype)
        elif name.endswith(".beta") or name == "head.b":
            params[name] = np.zeros(shape, dtype)
        else:
            fan_in = shape[0] * shape[1] if len(shape) == 3 else shape[0]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return ModelState(config, params, buffers)


# --- forward / backward ------------------------------------------------------------

class _Maps:
    """Kernel maps for one batch, keyed by input stride, kernel and stride."""

    def __init__(self):
        self._maps = {}

    def conv(self, x: SparseTensor, k: int, stride: int):
        key = ("conv", x.stride, k, stride)
        if key not in self._maps:
            self._maps[key] = build_kernel_map(x, k, stride)
        return self._maps[key]

    def pool(self, x: SparseTensor):
        key = ("pool", x.stride)
        if key not in self._maps:
            self._maps[key] = pool_map(x)
        return self._maps[key]


def _require_events(x: SparseTensor, layer: str) -> None:
    if np.any(x.event_sizes() == 0):
        raise EmptyEvent(f"an event has no active sites after layer {layer!r}")


@dataclass
class Tape:
    mode: str
    caches: dict
    bn_updates: dict


class _Runner:
    def __init__(self, state: ModelState, mode: str, step: int):
        self.s = state
        self.mode = mode
        self.step = step
        self.maps = _Maps()
        self.c: dict = {}
        self.bn_updates: dict = {}

    def conv(self, name, x, k, stride):
        kmap = self.maps.conv(x, k, stride)
        self.c[name] = (x, kmap)
        y = L.sparse_conv_fwd(x, self.s.params[f"{name}.W"], kmap)
        if stride > 1:
            _require_events(y, name)
        return y

    def bn(self, name, x):
        y, cache = L.batchnorm_fwd(x, self.s.bn(name), self.mode)
        self.c[name] = cache
        if cache.train:
            self.bn_updates[f"{name}.running_mean"] = cache.new_running_mean
            self.bn_updates[f"{name}.running_var"] = cache.new_running_var
        return y

    def relu(self, name, x):
        self.c[name] = x.feats
        return x.replace(L.relu_fwd(x.feats))

    def block(self, name, x, stride, down):
        h = self.relu(f"{name}.relu1", self.bn(f"{name}.bn1", self.conv(f"{name}.conv1", x, 3, stride)))
        h = self.bn(f"{name}.bn2", self.conv(f"{name}.conv2", h, 3, 1))
        if down:
            sc = self.bn(f"{name}.down.bn", self.conv(f"{name}.down.conv", x, 1, stride))
        else:
            sc = x
        if sc.coords is not h.coords and not np.array_equal(sc.coords, h.coords):
            raise AssertionError(f"{name}: residual branches disagree on coordinates")
        return self.relu(f"{name}.relu_out", h.replace(h.feats + sc.feats))

    def run(self, x: SparseTensor):
        cfg = self.s.config
        x = x.replace(x.feats.astype(self.s.dtype, copy=False))
        h = self.relu("stem.relu", self.bn("stem.bn", self.conv("stem.conv", x, 3, 2)))
        kmap = self.maps.pool(h)
        h, arg = L.sparse_maxpool_fwd(h, kmap)
        self.c["stem.pool"] = (arg, kmap.n_in)
        for name, _, _, stride, down in block_specs(cfg):
            h = self.block(name, h, stride, down)
        f, mask = L.dropout_fwd(h.feats, cfg.dropout_p, cfg.seed, 0, self.step, self.mode)
        self.c["prepool.dropout"] = mask
        h = self.bn("prepool.bn", self.conv("prepool.conv", h.replace(f), 3, 3))
        self.c["prepool.gelu"] = h.feats
        h = h.replace(L.gelu_fwd(h.feats))
        emb, arg = L.global_maxpool_fwd(h)
        self.c["pool"] = (arg, len(h))
        self.c["head"] = emb
        logits = L.linear_fwd(emb, self.s.params["head.W"], self.s.params["head.b"])
        return logits, emb


def forward(state: ModelState, x: SparseTensor, mode: str = "eval", step: int = 0, return_tape: bool = False):
    """Returns ``(logits, embedding)`` and, if asked, the tape for :func:`backward`.

    ``step`` selects the dropout mask in train mode; eval mode is deterministic.
    Batch-norm running statistics are not modified: train-mode updates are
    collected in ``tape.bn_updates`` for the caller to apply.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    r = _Runner(state, mode, step)
    logits, emb = r.run(x)
    if return_tape:
        return logits, emb, Tape(mode, r.c, r.bn_updates)
    return logits, emb


def backward(state: ModelState, tape: Tape, grad_logits: np.ndarray, grad_embedding: np.ndarray | None = None):
    """Gradients of every parameter (and ``"input"`` features) given dL/dlogits."""
    c = tape.caches
    p = state.params
    grads: dict[str, np.ndarray] = {}

    def conv_b(name, g):
        x, kmap = c[name]
        gx, gw = L.sparse_conv_bwd(x, p[f"{name}.W"], kmap, g)
        grads[f"{name}.W"] = gw
        return gx

    def bn_b(name, g):
        gx, gg, gb = L.batchnorm_bwd(c[name], g)
        grads[f"{name}.gamma"] = gg
        grads[f"{name}.beta"] = gb
        return gx

    def relu_b(name, g):
        return L.relu_bwd(c[name], g)

    emb = c["head"]
    g_emb, grads["head.W"], grads["head.b"] = L.linear_bwd(emb, p["head.W"], grad_logits)
    if grad_embedding is not None:
        g_emb = g_emb + grad_embedding
    arg, n = c["pool"]
    g = L.global_maxpool_bwd(arg, g_emb, n)
    g = L.gelu_bwd(c["prepool.gelu"], g)
    g = conv_b("prepool.conv", bn_b("prepool.bn", g))
    g = L.dropout_bwd(c["prepool.dropout"], g)
    for name, _, _, _, down in reversed(block_specs(state.config)):
        g = relu_b(f"{name}.relu_out", g)
        gh = conv_b(f"{name}.conv2", bn_b(f"{name}.bn2", g))
        gh = conv_b(f"{name}.conv1", bn_b(f"{name}.bn1", relu_b(f"{name}.relu1", gh)))
        gs = conv_b(f"{name}.down.conv", bn_b(f"{name}.down.bn", g)) if down else g
        g = gh + gs
    arg, n = c["stem.pool"]
    g = L.sparse_maxpool_bwd(arg, g, n)
    g = conv_b("stem.conv", bn_b("stem.bn", relu_b("stem.relu", g)))
    grads["input"] = g
    return grads


def embed(state: ModelState, events, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Eval-mode penultimate-layer vectors for ``(coords, feats)`` events, in order."""
    chunks = [events[i:i + batch_size] for i in range(0, len(events), batch_size)]

    def run(chunk):
        return forward(state, batch(chunk, state.dtype), "eval")[1]

    if not chunks:
        return np.zeros((0, state.config.embed_dim), state.dtype)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(ch) for ch in chunks]
    return np.concatenate(parts)


# --- checkpoints ----------------------------------------------------------------

MAGIC = b"STPC"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _serialize(state: ModelState) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(
        {"config": asdict(state.config), "meta": state.meta}, sort_keys=True
    ).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(meta)))
    buf.write(meta)
    tensors = [("param", k, v) for k, v in state.params.items()] + [
        ("buffer", k, v) for k, v in state.buffers.items()
    ]
    buf.write(struct.pack("<I", len(tensors)))
    for kind, name, arr in tensors:
        key = f"{kind}:{name}".encode("utf-8")
        code = _DTYPE_CODES[arr.dtype]
        buf.write(struct.pack("<HBB", len(key), code, arr.ndim))
        buf.write(key)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(state: ModelState, path) -> None:
    atomic_write(path, _serialize(state))


def load_checkpoint(path) -> ModelState:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return _deserialize(data)


def _deserialize(data: bytes) -> ModelState:
    if len(data) < 14 or data[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: expected magic {MAGIC!r}, got {data[:4]!r}")
    version, meta_len = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is truncated or corrupt (checksum mismatch)")
    pos = 10
    try:
        meta = json.loads(body[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        config = ArchConfig.from_dict(meta["config"])
        (n_tensors,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params, buffers = {}, {}
        for _ in range(n_tensors):
            klen, code, ndim = struct.unpack_from("<HBB", body, pos)
            pos += 4
            kind, name = body[pos:pos + klen].decode("utf-8").split(":", 1)
            pos += klen
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"tensor {name} runs past end of file")
            arr = np.frombuffer(body, dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
            pos += nbytes
            arr = arr.astype(dt.newbyteorder("="))
            (params if kind == "param" else buffers)[name] = arr
    except CheckpointError:
        raise
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    if pos != len(body):
        raise CheckpointError("trailing bytes after last tensor")
    expected = param_shapes(config)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        raise CheckpointError("checkpoint tensors do not match its architecture config")
    return ModelState(config, params, buffers, meta.get("meta", {}))
