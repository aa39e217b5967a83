"""File formats: DPT1 tensors, DPP1 parameter bundles, key=value manifests, PPM images.

DPT1 layout (little-endian)::

    b"DPT1" | rank: u8 | dims: rank x u64 | payload: prod(dims) x f32, row-major

DPP1 is a text header followed by DPT1 blocks::

    b"DPP1\\n" | key=value lines | b"\\n" | one DPT1 block per name in ``tensors=``

All writers go through a temp file and ``os.replace``.
"""
import io
import os
import struct
import tempfile
from typing import BinaryIO, Dict, Tuple, Union

import numpy as np

from .exceptions import CorruptFile, NotMultiple, TooSmall, UnsupportedFormat
from .geometry import compute_grid

TENSOR_MAGIC = b"DPT1"
PARAMS_MAGIC = b"DPP1\n"
RESIZE_POLICIES = ("reject", "nearest", "bilinear")

PathLike = Union[str, os.PathLike]


def atomic_write(path: PathLike, data: bytes):
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- DPT1 ---------------------------------------------------------------

def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ValueError("rank above 255 cannot be encoded")
    header = TENSOR_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one DPT1 block at ``offset``; returns the float32 array and the end offset."""
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise CorruptFile(f"missing DPT1 magic at byte {offset}")
    pos = offset + 4
    if len(buf) < pos + 1:
        raise CorruptFile("truncated DPT1 header")
    rank = buf[pos]
    pos += 1
    if len(buf) < pos + 8 * rank:
        raise CorruptFile("truncated DPT1 dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = 1
    for n in dims:
        count *= n
    end = pos + 4 * count
    if len(buf) < end:
        raise CorruptFile(f"DPT1 payload truncated: need {4 * count} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
    return arr, end


def write_tensor(path: PathLike, arr):
    atomic_write(path, tensor_to_bytes(arr))


def read_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise CorruptFile(f"{len(buf) - end} trailing bytes after DPT1 payload in {path}")
    return arr


# -- key=value text -----------------------------------------------------

def format_manifest(entries: Dict[str, object]) -> str:
    lines = []
    for k, v in entries.items():
        s = str(v)
        if "=" in k or "\n" in k or "\n" in s:
            raise ValueError(f"cannot encode manifest entry {k!r}={s!r}")
        lines.append(f"{k}={s}\n")
    return "".join(lines)


def parse_manifest(text: str) -> Dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CorruptFile(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_manifest(path: PathLike, entries: Dict[str, object]):
    atomic_write(path, format_manifest(entries).encode())


def read_manifest(path: PathLike) -> Dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_manifest(f.read())


# -- DPP1 ---------------------------------------------------------------

def params_to_bytes(header: Dict[str, object], tensors: Dict[str, np.ndarray]) -> bytes:
    """Serialize named tensors; ``header`` keys are written in the given order."""
    names = list(tensors)
    for name in names:
        if not name or "," in name or "=" in name:
            raise ValueError(f"invalid tensor name {name!r}")
    entries = dict(header)
    entries["tensors"] = ",".join(names)
    out = io.BytesIO()
    out.write(PARAMS_MAGIC)
    out.write(format_manifest(entries).encode())
    out.write(b"\n")
    for name in names:
        out.write(tensor_to_bytes(tensors[name]))
    return out.getvalue()


def params_from_bytes(buf: bytes) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    if not buf.startswith(PARAMS_MAGIC):
        raise CorruptFile("missing DPP1 magic")
    split = buf.find(b"\n\n", len(PARAMS_MAGIC) - 1)
    if split < 0:
        raise CorruptFile("DPP1 header is not terminated")
    try:
        header = parse_manifest(buf[len(PARAMS_MAGIC):split + 1].decode("utf-8"))
    except UnicodeDecodeError as e:
        raise CorruptFile(f"DPP1 header is not UTF-8: {e}") from None
    if "tensors" not in header:
        raise CorruptFile("DPP1 header lacks a tensors= entry")
    names = header.pop("tensors").split(",") if header.get("tensors") else []
    pos = split + 2
    tensors = {}
    for name in names:
        tensors[name], pos = tensor_from_bytes(buf, pos)
    if pos != len(buf):
        raise CorruptFile(f"{len(buf) - pos} trailing bytes after the last DPT1 block")
    return header, tensors


def save_params(path: PathLike, header, tensors):
    atomic_write(path, params_to_bytes(header, tensors))


def load_params(path: PathLike):
    with open(path, "rb") as f:
        return params_from_bytes(f.read())


# -- images -------------------------------------------------------------

def _ppm_tokens(f: BinaryIO, n: int):
    """Read ``n`` whitespace-separated header fields, skipping ``#`` comments."""
    out = []
    tok = b""
    while len(out) < n:
        c = f.read(1)
        if not c:
            raise CorruptFile("PPM header truncated")
        if c == b"#" and not tok:
            while c not in (b"\n", b"\r", b""):
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                out.append(tok)
                tok = b""
            continue
        tok += c
    return out


def read_ppm(path: PathLike) -> np.ndarray:
    """Decode a binary 8-bit PPM (P6) into a ``(H, W, 3)`` uint8 array."""
    with open(path, "rb") as f:
        if f.read(2) != b"P6":
            raise UnsupportedFormat(f"{path}: only binary PPM (P6) is supported")
        try:
            w, h, maxval = (int(t) for t in _ppm_tokens(f, 3))
        except ValueError:
            raise CorruptFile(f"{path}: malformed PPM header") from None
        if maxval != 255:
            raise UnsupportedFormat(f"{path}: only 8-bit PPM (maxval 255) is supported, got {maxval}")
        if w < 1 or h < 1:
            raise CorruptFile(f"{path}: bad PPM size {w}x{h}")
        data = f.read(w * h * 3)
    if len(data) != w * h * 3:
        raise CorruptFile(f"{path}: PPM payload truncated ({len(data)} of {w * h * 3} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def ppm_bytes(img) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w, c = img.shape
    if c != 3:
        raise ValueError("PPM needs 3 channels")
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def write_ppm(path: PathLike, img):
    atomic_write(path, ppm_bytes(img))


def normalize_u8(img) -> np.ndarray:
    """Map bytes to [-1, 1] via (v/255 - 0.5)/0.5."""
    return (np.asarray(img, dtype=np.float64) / 255.0 - 0.5) / 0.5


def resize(img, new_w: int, new_h: int, method: str = "bilinear") -> np.ndarray:
    """Resize an (H, W, C) float array; pixel centers are aligned (half-pixel convention)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if method == "nearest":
        ys = np.minimum((np.arange(new_h) * h) // new_h, h - 1)
        xs = np.minimum((np.arange(new_w) * w) // new_w, w - 1)
        return img[ys][:, xs]
    if method != "bilinear":
        raise ValueError(f"unknown resize method {method!r}")

    def coords(n_out, n_in):
        c = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(new_h, h)
    x0, x1, fx = coords(new_w, w)
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy[:, None, None]) + bot * fy[:, None, None]


def nearest_multiple(size: int, base: int) -> int:
    return max(base, int(np.floor(size / base + 0.5)) * base)


def load_image(path: PathLike, resize_policy: str = "reject", multiple=(1, 1)) -> np.ndarray:
    """Read a P6 file as a normalized float64 ``(H, W, 3)`` image.

    ``multiple`` is the encoder input ``(w, h)``. Sizes that are not exact
    multiples are rejected (``NotMultiple`` naming the two nearest valid
    sizes) or resized to the nearest multiple with ``nearest``/``bilinear``.
    """
    if resize_policy not in RESIZE_POLICIES:
        raise ValueError(f"unknown resize policy {resize_policy!r}")
    img = normalize_u8(read_ppm(path))
    h, w = img.shape[:2]
    mw, mh = multiple
    try:
        compute_grid(w, h, mw, mh)
        return img
    except (NotMultiple, TooSmall):
        if resize_policy == "reject":
            raise
    return resize(img, nearest_multiple(w, mw), nearest_multiple(h, mh), resize_policy)
