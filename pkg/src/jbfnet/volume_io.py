"""Bit-exact volumetric file format, checkpoint format, and PNG slice export.

Volume format (``.jbfvol``): a short text header followed by raw
little-endian float32 payload, z-major then y then x::

    jbfvol 1
    dims <nx> <ny> <nz>
    spacing <sx> <sy> <sz>
    dtype f32
    <blank line>
    <nx*ny*nz little-endian f32>

Checkpoint format: magic ``JBFN``, u32 version, u32 tensor count, then per
tensor: u16 name length, UTF-8 name, u8 rank, rank*u32 dims, little-endian
f32 payload. The remainder of the file is a UTF-8 ``key=value`` metadata
block, one pair per line.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

VOLUME_MAGIC = "jbfvol 1"
CHECKPOINT_MAGIC = b"JBFN"
CHECKPOINT_VERSION = 1

# display window default for exported slices
DEFAULT_WINDOW = (-800.0, 1200.0)


class VolumeFormatError(ValueError):
    """Malformed volume file (bad magic, bad header fields)."""


class TruncatedPayloadError(ValueError):
    """Header-declared extents disagree with the payload length."""


class NonFiniteDataError(ValueError):
    """Volume payload contains NaN or Inf."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class Volume:
    """3D scalar grid in HU-like units; data is (nz, ny, nx) float32."""

    nx: int
    ny: int
    nz: int
    spacing: tuple = (1.0, 1.0, 1.0)
    data: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.data is None:
            self.data = np.zeros((self.nz, self.ny, self.nx), dtype=np.float32)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != (self.nz, self.ny, self.nx):
            raise VolumeFormatError(
                f"volume data shape {self.data.shape} != (nz,ny,nx)=({self.nz},{self.ny},{self.nx})"
            )

    def same_extents(self, other):
        return (self.nx, self.ny, self.nz) == (other.nx, other.ny, other.nz)


def write_volume(vol, path):
    if not np.isfinite(vol.data).all():
        raise NonFiniteDataError("refusing to write volume with non-finite values")
    header = (
        f"{VOLUME_MAGIC}\n"
        f"dims {vol.nx} {vol.ny} {vol.nz}\n"
        f"spacing {vol.spacing[0]!r} {vol.spacing[1]!r} {vol.spacing[2]!r}\n"
        f"dtype f32\n"
        f"\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def read_volume(path):
    with open(path, "rb") as f:
        raw = f.read()
    nl = 0
    lines = []
    pos = 0
    for _ in range(4):
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise VolumeFormatError(f"{path}: truncated header")
        lines.append(raw[pos:nl].decode("ascii", errors="replace"))
        pos = nl + 1
    if raw[pos : pos + 1] != b"\n":
        raise VolumeFormatError(f"{path}: missing blank line after header")
    pos += 1

    if lines[0] != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {lines[0]!r}")
    try:
        _, nx, ny, nz = lines[1].split()
        nx, ny, nz = int(nx), int(ny), int(nz)
        _, sx, sy, sz = lines[2].split()
        spacing = (float(sx), float(sy), float(sz))
    except ValueError as e:
        raise VolumeFormatError(f"{path}: bad header line: {e}") from None
    if not lines[1].startswith("dims ") or not lines[2].startswith("spacing "):
        raise VolumeFormatError(f"{path}: unexpected header fields")
    if lines[3] != "dtype f32":
        raise VolumeFormatError(f"{path}: unsupported dtype line {lines[3]!r}")
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise VolumeFormatError(f"{path}: non-positive extents {nx}x{ny}x{nz}")
    if any(s <= 0 for s in spacing):
        raise VolumeFormatError(f"{path}: non-positive spacing {spacing}")

    expected = nx * ny * nz * 4
    payload = raw[pos:]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx)
    if not np.isfinite(data).all():
        raise NonFiniteDataError(f"{path}: payload contains non-finite values")
    return Volume(nx=nx, ny=ny, nz=nz, spacing=spacing, data=data.copy())


def save_checkpoint(path, tensors, metadata):
    """tensors: ordered dict name -> float32 ndarray; metadata: dict str->str."""
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor rank {arr.ndim} exceeds format limit")
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            out.write(struct.pack("<I", dim))
        out.write(np.ascontiguousarray(arr).tobytes())
    for key in metadata:
        val = str(metadata[key])
        if "\n" in key or "=" in key or "\n" in val:
            raise CheckpointError(f"metadata key/value not encodable: {key!r}")
        out.write(f"{key}={val}\n".encode("utf-8"))
    with open(path, "wb") as f:
        f.write(out.getvalue())


def load_checkpoint(path):
    """Returns (tensors) dict name->float32 array and (metadata) dict."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    tensors = {}
    for _ in range(count):
        if pos + 2 > len(raw):
            raise CheckpointError(f"{path}: truncated tensor table")
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        nbytes = size * 4
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += nbytes
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = arr.copy()
    metadata = {}
    tail = raw[pos:].decode("utf-8")
    for line in tail.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"{path}: bad metadata line {line!r}")
        key, val = line.split("=", 1)
        metadata[key] = val
    return tensors, metadata


def export_png_slice(vol, z, path, window=DEFAULT_WINDOW):
    """Write one z-slice as 8-bit grayscale PNG.

    Linear map [lo, hi] -> [0, 255] with clamping and floor quantization:
    value == lo maps to 0, value == hi maps to 255, the exact midpoint
    floors to 127.
    """
    from PIL import Image

    lo, hi = float(window[0]), float(window[1])
    if hi <= lo:
        raise ValueError(f"window must satisfy lo < hi, got [{lo}, {hi}]")
    if not (0 <= z < vol.nz):
        raise ValueError(f"slice index {z} out of range for nz={vol.nz}")
    sl = vol.data[z].astype(np.float64)
    t = np.clip((sl - lo) / (hi - lo), 0.0, 1.0)
    px = np.floor(t * 255.0)
    px = np.minimum(px, 255.0).astype(np.uint8)
    Image.fromarray(px, mode="L").save(path, format="PNG")
