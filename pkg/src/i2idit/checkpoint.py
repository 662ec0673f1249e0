"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DITCKPT1"              magic
    u32                      format version
    u32 n, n bytes           config snapshot, UTF-8 JSON with sorted keys
    u64                      training step
    u32 n, n bytes           RNG state, UTF-8 JSON
    table                    model parameters
    table                    codec parameters (empty for the identity codec)
    5 x f64, u64             AdamW lr, weight_decay, beta1, beta2, eps, step
    table, table             AdamW first and second moments

    table := u32 count, then per entry:
             u16 n, n bytes name; u8 ndim; ndim x u32 dims; prod(dims) x f64

Nothing may follow the last table.
"""

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileError, ParseError, VersionError
from .optim import AdamWState

MAGIC = b"DITCKPT1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    params: OrderedDict
    step: int = 0
    rng_state: str = "{}"
    codec_params: OrderedDict = field(default_factory=OrderedDict)
    optimizer: AdamWState = field(default_factory=AdamWState)


def _pack_table(out, table):
    out.append(struct.pack("<I", len(table)))
    for name, arr in table.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())


def to_bytes(ckpt):
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    cfg = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<I", len(cfg)) + cfg)
    out.append(struct.pack("<Q", ckpt.step))
    rng = ckpt.rng_state.encode("utf-8")
    out.append(struct.pack("<I", len(rng)) + rng)
    _pack_table(out, ckpt.params)
    _pack_table(out, ckpt.codec_params)
    opt = ckpt.optimizer
    out.append(struct.pack("<5dQ", opt.lr, opt.weight_decay, opt.beta1, opt.beta2, opt.eps, opt.step))
    _pack_table(out, OrderedDict(opt.m))
    _pack_table(out, OrderedDict(opt.v))
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what, width="<I"):
        (n,) = self.unpack(width, what)
        start = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(f"{what} is not valid UTF-8", start) from None

    def table(self, what):
        (count,) = self.unpack("<I", f"{what} count")
        table = OrderedDict()
        for _ in range(count):
            name = self.text(f"{what} name", "<H")
            (ndim,) = self.unpack("<B", f"{name} rank")
            dims = self.unpack(f"<{ndim}I", f"{name} shape")
            n = int(np.prod(dims)) if ndim else 1
            raw = self.take(8 * n, f"{name} values")
            table[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
        return table


def from_bytes(buf):
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise VersionError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint format version {version}")
    start = r.pos
    try:
        config = json.loads(r.text("config"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"config snapshot is not JSON: {exc}", start) from None
    (step,) = r.unpack("<Q", "step")
    rng_state = r.text("rng state")
    params = r.table("parameters")
    codec_params = r.table("codec parameters")
    lr, wd, b1, b2, eps, opt_step = r.unpack("<5dQ", "optimizer header")
    m = r.table("adam m")
    v = r.table("adam v")
    if r.pos != len(buf):
        raise ParseError(f"{len(buf) - r.pos} trailing bytes after checkpoint", r.pos)
    opt = AdamWState(lr=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps, step=opt_step, m=dict(m), v=dict(v))
    return Checkpoint(config=config, params=params, step=step, rng_state=rng_state,
                      codec_params=codec_params, optimizer=opt)


def save_checkpoint(path, ckpt):
    try:
        Path(path).write_bytes(to_bytes(ckpt))
    except OSError as exc:
        raise FileError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FileError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf)
