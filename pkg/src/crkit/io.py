"""Binary tensor/parameter formats, PGM heatmaps and atomic file writes.

CRT1 (tensor)::

    b"CRT1" | u32 n, c, h, w (little-endian) | n*c*h*w float32 LE, row-major

CRP1 (CRSelector params)::

    b"CRP1" | u32 version | u32 block count
    | per block: 16-byte NUL-padded ASCII name + CRT1 block
    | u32 m | f32 r | f32 tau | u8 hard | u64 seed

SCA1 (scale-aware head params)::

    b"SCA1" | CRT1 gate weight (1, c, 1, 1) | CRT1 gate bias (1, 1, 1, 1)

Conv weights are stored as ``(c_out, c_in, 1, 1)``, biases as ``(1, c_out, 1, 1)``
and plain matrices as ``(1, 1, rows, cols)``.
"""
from __future__ import annotations

import io as _io
import os
from pathlib import Path
import re
import struct
import tempfile

import numpy as np

from .crselector import CRSelectorParams
from .sca import ScAParams
from .tensor import Conv1x1Params, DimensionError

CRT_MAGIC = b"CRT1"
CRP_MAGIC = b"CRP1"
SCA_MAGIC = b"SCA1"
CRP_VERSION = 1
NAME_LEN = 16
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Malformed or truncated file content."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- CRT1 --------------------------------------------------------------------

def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.ndim != 4 or min(t.shape) < 1:
        raise DimensionError(f"CRT1 needs a 4-D tensor with all dims >= 1, got {t.shape}")
    return CRT_MAGIC + struct.pack("<4I", *t.shape) + np.ascontiguousarray(t, dtype=_F32).tobytes()


def _read_exact(fh, size: int, what: str) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError(f"truncated {what}: expected {size} bytes, got {len(buf)}")
    return buf


def read_tensor_from(fh) -> np.ndarray:
    magic = _read_exact(fh, 4, "CRT1 magic")
    if magic != CRT_MAGIC:
        raise FormatError(f"bad CRT1 magic {magic!r}")
    shape = struct.unpack("<4I", _read_exact(fh, 16, "CRT1 header"))
    if min(shape) < 1:
        raise FormatError(f"CRT1 dims must be >= 1, got {shape}")
    count = int(np.prod(shape))
    payload = _read_exact(fh, 4 * count, "CRT1 payload")
    return np.frombuffer(payload, dtype=_F32).astype(np.float32).reshape(shape)


def decode_tensor(data: bytes) -> np.ndarray:
    fh = _io.BytesIO(data)
    t = read_tensor_from(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after CRT1 payload")
    return t


def save_tensor(path, t: np.ndarray) -> None:
    atomic_write(path, encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    try:
        return decode_tensor(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --- CRP1 --------------------------------------------------------------------

_CRP_CONVS = {"gti1": "gti_conv1", "gti2": "gti_conv2", "vconv": "v_conv",
              "offc": "offset_conv", "outc": "out_conv"}
_CRP_MATS = {"fred": "reduce_w", "wmsk": "w_mask", "wq": "w_q", "wk": "w_k"}


def _name_bytes(name: str) -> bytes:
    raw = name.encode("ascii")
    if len(raw) > NAME_LEN:
        raise ValueError(f"block name {name!r} longer than {NAME_LEN} bytes")
    return raw.ljust(NAME_LEN, b"\0")


def _conv_blocks(tag: str, conv: Conv1x1Params):
    yield f"{tag}.weight", conv.weight[:, :, None, None]
    yield f"{tag}.bias", conv.bias[None, :, None, None]


def crselector_blocks(p: CRSelectorParams) -> list[tuple[str, np.ndarray]]:
    """``(name, 4-D tensor)`` pairs in file order."""
    blocks = []
    for tag, field in _CRP_CONVS.items():
        blocks.extend(_conv_blocks(tag, getattr(p, field)))
    for tag, field in _CRP_MATS.items():
        blocks.append((tag, np.asarray(getattr(p, field))[None, None]))
    return blocks


def encode_crselector_params(p: CRSelectorParams, seed: int) -> bytes:
    blocks = crselector_blocks(p)
    out = [CRP_MAGIC, struct.pack("<II", CRP_VERSION, len(blocks))]
    for name, arr in blocks:
        out.append(_name_bytes(name))
        out.append(encode_tensor(arr))
    out.append(struct.pack("<IffBQ", p.m, p.r, p.tau, int(p.hard_mask), seed))
    return b"".join(out)


def _conv_from_blocks(blocks, tag) -> Conv1x1Params:
    w, b = blocks[f"{tag}.weight"], blocks[f"{tag}.bias"]
    if w.shape[2:] != (1, 1) or b.shape[0] != 1 or b.shape[2:] != (1, 1):
        raise FormatError(f"block {tag}: conv weight/bias have unexpected shapes {w.shape}, {b.shape}")
    return Conv1x1Params(w[:, :, 0, 0], b[0, :, 0, 0])


def decode_crselector_params(data: bytes) -> tuple[CRSelectorParams, int]:
    """Returns ``(params, seed)``. Every shape is validated."""
    fh = _io.BytesIO(data)
    if _read_exact(fh, 4, "CRP1 magic") != CRP_MAGIC:
        raise FormatError("bad CRP1 magic")
    version, count = struct.unpack("<II", _read_exact(fh, 8, "CRP1 header"))
    if version != CRP_VERSION:
        raise FormatError(f"unsupported CRP1 version {version}")
    blocks = {}
    for _ in range(count):
        name = _read_exact(fh, NAME_LEN, "CRP1 block name").rstrip(b"\0").decode("ascii")
        blocks[name] = read_tensor_from(fh)
    m, r, tau, hard, seed = struct.unpack("<IffBQ", _read_exact(fh, 21, "CRP1 scalars"))
    if fh.read(1):
        raise FormatError("trailing bytes after CRP1 scalars")
    try:
        convs = {field: _conv_from_blocks(blocks, tag) for tag, field in _CRP_CONVS.items()}
        mats = {}
        for tag, field in _CRP_MATS.items():
            t = blocks[tag]
            if t.shape[:2] != (1, 1):
                raise FormatError(f"block {tag}: expected a (1, 1, rows, cols) matrix, got {t.shape}")
            mats[field] = t[0, 0]
    except KeyError as exc:
        raise FormatError(f"CRP1 missing block {exc.args[0]!r}") from None
    try:
        p = CRSelectorParams(**convs, **mats, m=m, r=float(r), tau=float(tau), hard_mask=bool(hard))
    except ValueError as exc:
        raise FormatError(f"CRP1 parameters invalid: {exc}") from None
    return p, seed


def save_crselector_params(path, p: CRSelectorParams, seed: int) -> None:
    atomic_write(path, encode_crselector_params(p, seed))


def load_crselector_params(path) -> tuple[CRSelectorParams, int]:
    try:
        return decode_crselector_params(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --- SCA1 --------------------------------------------------------------------

def encode_sca_params(p: ScAParams) -> bytes:
    w, b = p.gate_conv.weight, p.gate_conv.bias
    return SCA_MAGIC + encode_tensor(w[:, :, None, None]) + encode_tensor(b[None, :, None, None])


def decode_sca_params(data: bytes) -> ScAParams:
    fh = _io.BytesIO(data)
    if _read_exact(fh, 4, "SCA1 magic") != SCA_MAGIC:
        raise FormatError("bad SCA1 magic")
    w = read_tensor_from(fh)
    b = read_tensor_from(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after SCA1 payload")
    if w.shape[0] != 1 or w.shape[2:] != (1, 1) or b.shape != (1, 1, 1, 1):
        raise FormatError(f"SCA1 gate shapes invalid: weight {w.shape}, bias {b.shape}")
    return ScAParams(Conv1x1Params(w[:, :, 0, 0], b[0, :, 0, 0]))


def save_sca_params(path, p: ScAParams) -> None:
    atomic_write(path, encode_sca_params(p))


def load_sca_params(path) -> ScAParams:
    try:
        return decode_sca_params(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --- PGM ---------------------------------------------------------------------

def heatmap(t: np.ndarray, batch: int = 0) -> np.ndarray:
    """Channel-mean activation map, min-max scaled to uint8 (flat maps become 0)."""
    plane = np.asarray(t, dtype=np.float64)[batch].mean(axis=0)
    lo, hi = plane.min(), plane.max()
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.round((plane - lo) / (hi - lo) * 255).astype(np.uint8)


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    m = _PGM_HEADER.match(data)
    if m is None:
        raise FormatError("not a binary PGM (P5)")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    pixels = data[m.end():m.end() + w * h]
    if len(pixels) != w * h:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
