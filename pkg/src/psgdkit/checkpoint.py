"""Flat binary serialization of preconditioner state for checkpointing.

Record layout (all integers little-endian, payload little-endian float64):

    magic    4 bytes   b"PCS1"
    tag      1 byte    1 dense, 2 diag, 3 splu, 4 kron, 5 scan, 6 direct sum
    nshape   uint32    number of shape fields
    shape    nshape x uint64
    npayload uint64    number of float64 values
    payload  npayload x float64, factors concatenated in a fixed order

Shapes and payload order per variant:
    dense      shape [dim];    payload Q row-major
    diag       shape [dim];    payload q
    splu       shape [dim, r]; payload L1, L2, l3, U1, U2, u3 (row-major)
    kron       shape [m, n];   payload Q1, Q2 (row-major)
    scan       shape [m, n];   payload q1, d2, c2
    direct sum shape [];       payload empty, followed by uint32 block count
               and, per block, uint16 name length + UTF-8 name + nested record
"""

import struct

import numpy as np

from .errors import ContractViolationError
from .preconditioners import (
    DensePrecond,
    DiagPrecond,
    DirectSumPrecond,
    KronPrecond,
    Preconditioner,
    ScanPrecond,
    SpluPrecond,
)

__all__ = ["load_state", "save_state", "state_from_bytes", "state_to_bytes"]

_MAGIC = b"PCS1"
_TAGS = {DensePrecond: 1, DiagPrecond: 2, SpluPrecond: 3, KronPrecond: 4,
         ScanPrecond: 5, DirectSumPrecond: 6}


def _payload(p: Preconditioner):
    if isinstance(p, DensePrecond):
        return [p.dim], [p.q]
    if isinstance(p, DiagPrecond):
        return [p.dim], [p.q]
    if isinstance(p, SpluPrecond):
        return [p.dim, p.r], [p.l1, p.l2, p.l3, p.u1, p.u2, p.u3]
    if isinstance(p, KronPrecond):
        return [p.m, p.n], [p.q1, p.q2]
    if isinstance(p, ScanPrecond):
        return [p.m, p.n], [p.q1, p.d2, p.c2]
    raise ContractViolationError(f"cannot serialize {type(p).__name__}")


def state_to_bytes(p: Preconditioner) -> bytes:
    tag = _TAGS.get(type(p))
    if tag is None:
        raise ContractViolationError(f"cannot serialize {type(p).__name__}")
    out = [_MAGIC, struct.pack("<B", tag)]
    if isinstance(p, DirectSumPrecond):
        out.append(struct.pack("<I", 0))
        out.append(struct.pack("<Q", 0))
        out.append(struct.pack("<I", len(p.blocks)))
        for name, block in p.blocks:
            encoded = name.encode("utf-8")
            out.append(struct.pack("<H", len(encoded)))
            out.append(encoded)
            out.append(state_to_bytes(block))
        return b"".join(out)
    shape, arrays = _payload(p)
    flat = np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)
    out.append(struct.pack("<I", len(shape)))
    out.extend(struct.pack("<Q", int(s)) for s in shape)
    out.append(struct.pack("<Q", flat.size))
    out.append(np.asarray(flat, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContractViolationError("truncated preconditioner record")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def _read_record(r: _Reader) -> Preconditioner:
    if r.take(4) != _MAGIC:
        raise ContractViolationError("bad magic in preconditioner record")
    tag = r.unpack("<B")
    nshape = r.unpack("<I")
    shape = [r.unpack("<Q") for _ in range(nshape)]
    npayload = r.unpack("<Q")
    payload = np.frombuffer(r.take(8 * npayload), dtype="<f8").astype(float)

    def cut(*dims):
        nonlocal payload
        n = int(np.prod(dims)) if dims else 0
        chunk, payload = payload[:n], payload[n:]
        return chunk.reshape(dims) if len(dims) > 1 else chunk

    if tag == 1:
        (dim,) = shape
        p = DensePrecond(dim)
        p.q = cut(dim, dim)
        return p
    if tag == 2:
        (dim,) = shape
        p = DiagPrecond(dim)
        p.q = cut(dim)
        return p
    if tag == 3:
        dim, order = shape
        p = SpluPrecond(dim, order)
        k = dim - order
        p.l1 = cut(order, order)
        p.l2 = cut(k, order)
        p.l3 = cut(k)
        p.u1 = cut(order, order)
        p.u2 = cut(order, k)
        p.u3 = cut(k)
        return p
    if tag == 4:
        m, n = shape
        p = KronPrecond(m, n)
        p.q1 = cut(m, m)
        p.q2 = cut(n, n)
        return p
    if tag == 5:
        m, n = shape
        p = ScanPrecond(m, n)
        p.q1 = cut(m)
        p.d2 = cut(n)
        p.c2 = cut(n - 1)
        return p
    if tag == 6:
        nblocks = r.unpack("<I")
        blocks = []
        for _ in range(nblocks):
            name = r.take(r.unpack("<H")).decode("utf-8")
            blocks.append((name, _read_record(r)))
        return DirectSumPrecond(blocks)
    raise ContractViolationError(f"unknown preconditioner tag {tag}")


def state_from_bytes(data: bytes) -> Preconditioner:
    r = _Reader(data)
    p = _read_record(r)
    if r.pos != len(data):
        raise ContractViolationError("trailing bytes after preconditioner record")
    return p


def save_state(p: Preconditioner, path) -> None:
    with open(path, "wb") as fh:
        fh.write(state_to_bytes(p))


def load_state(path) -> Preconditioner:
    with open(path, "rb") as fh:
        return state_from_bytes(fh.read())
