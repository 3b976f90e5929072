"""Binary tensor container, flat key/value configs and dataset manifests.

Tensor file layout (little-endian throughout)::

    bytes 0-3   b"MRFT"
    byte  4     version (1)
    byte  5     dtype code: 0=float32 1=float64 2=complex64 3=complex128
    byte  6     ndim
    then        ndim x uint64 dims
    then        row-major payload, complex stored as interleaved (re, im)
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MRFT"
VERSION = 1

_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<c8"): 2,
    np.dtype("<c16"): 3,
}
_DTYPES = {code: dt for dt, code in _CODES.items()}


class TensorFormatError(ValueError):
    """Raised for malformed or unreadable tensor files."""


class ManifestError(ValueError):
    """Raised when a dataset manifest is incomplete or inconsistent."""


def _header(dtype: np.dtype, shape: tuple[int, ...]) -> bytes:
    return MAGIC + struct.pack("<BBB", VERSION, _CODES[dtype], len(shape)) + struct.pack(
        f"<{len(shape)}Q", *shape
    )


def write_tensor(path, array) -> None:
    """Write ``array`` to ``path`` in the MRFT layout."""
    array = np.asarray(array)
    if array.ndim < 1:
        raise TensorFormatError("ndim must be ≥ 1")
    if array.size == 0:
        raise TensorFormatError("array must be non-empty")
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _CODES:
        raise TensorFormatError(f"unencodable dtype {array.dtype}")
    payload = np.ascontiguousarray(array, dtype=dtype)
    with open(path, "wb") as fh:
        fh.write(_header(dtype, payload.shape))
        fh.write(payload.tobytes(order="C"))


@dataclass(frozen=True)
class TensorHeader:
    dtype: np.dtype
    shape: tuple[int, ...]
    offset: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * self.dtype.itemsize


def read_header(path) -> TensorHeader:
    """Parse only the header of a tensor file (payload size is checked too)."""
    with open(path, "rb") as fh:
        head = fh.read(7)
        if len(head) < 7 or head[:4] != MAGIC:
            raise TensorFormatError(f"bad magic in {path}")
        version, code, ndim = struct.unpack("<BBB", head[4:7])
        if version != VERSION:
            raise TensorFormatError(f"unsupported version {version} in {path}")
        if code not in _DTYPES:
            raise TensorFormatError(f"unknown dtype code {code} in {path}")
        if ndim < 1:
            raise TensorFormatError("ndim must be ≥ 1")
        raw = fh.read(8 * ndim)
        if len(raw) < 8 * ndim:
            raise TensorFormatError(f"truncated header in {path}")
        shape = struct.unpack(f"<{ndim}Q", raw)
    if any(d < 1 for d in shape):
        raise TensorFormatError(f"all dims must be ≥ 1, got {shape}")
    hdr = TensorHeader(_DTYPES[code], tuple(int(d) for d in shape), 7 + 8 * ndim)
    if os.path.getsize(path) - hdr.offset < hdr.nbytes:
        raise TensorFormatError(f"truncated payload in {path}")
    return hdr


def read_tensor(path) -> np.ndarray:
    """Read a tensor file back with its exact dims and dtype."""
    hdr = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(hdr.offset)
        buf = fh.read(hdr.nbytes)
    return np.frombuffer(buf, dtype=hdr.dtype).reshape(hdr.shape).copy()


# ---------------------------------------------------------------------------
# flat key = value configuration files


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ManifestError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ManifestError(f"line {lineno}: empty key")
        if key in out:
            raise ManifestError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_config(values: dict, header: str | None = None) -> str:
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def read_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def write_config(path, values: dict, header: str | None = None) -> None:
    Path(path).write_text(format_config(values, header), encoding="utf-8")


# ---------------------------------------------------------------------------
# dataset manifest

_PATH_KEYS = ("kspace", "trajectory", "coils", "dcf", "basis", "dictionary", "flip_angles")
_OPTIONAL_PATH_KEYS = ("ref_qmaps", "mask", "ref_tsmi")
_INT_KEYS = ("C", "M", "L", "T", "K")
_FLOAT_KEYS = ("tr_ms", "te_ms", "ti_ms")


@dataclass
class DatasetManifest:
    """Validated dataset description.

    Paths are resolved against the manifest's directory.  ``grid`` is the
    image matrix, 2 or 3 entries.
    """

    root: Path
    paths: dict[str, Path]
    C: int
    M: int
    L: int
    T: int
    K: int
    grid: tuple[int, ...]
    tr_ms: float
    te_ms: float
    ti_ms: float
    extra: dict[str, str] = field(default_factory=dict)

    def path(self, key: str) -> Path:
        return self.paths[key]

    def has(self, key: str) -> bool:
        return key in self.paths

    def to_config(self) -> dict[str, str]:
        values: dict[str, object] = {k: os.path.relpath(p, self.root) for k, p in self.paths.items()}
        values.update(C=self.C, M=self.M, L=self.L, T=self.T, K=self.K, grid=self.grid)
        values.update(tr_ms=self.tr_ms, te_ms=self.te_ms, ti_ms=self.ti_ms)
        values.update(self.extra)
        return {k: (",".join(map(str, v)) if isinstance(v, tuple) else str(v)) for k, v in values.items()}


def _expect(name: str, got: tuple[int, ...], want: tuple[int | None, ...], labels: tuple[str, ...]):
    if len(got) != len(want):
        raise ManifestError(f"{name}: expected {len(want)} dims {labels}, got shape {got}")
    for g, w, lab in zip(got, want, labels):
        if w is not None and g != w:
            raise ManifestError(f"{name}: dimension {lab} is {g} but manifest says {lab}={w}")


def load_manifest(path) -> DatasetManifest:
    """Load and cross-validate a manifest file.

    Only tensor headers are read, so validating full-scale datasets is cheap.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    raw = read_config(path)
    root = path.parent
    for key in _PATH_KEYS + _INT_KEYS + _FLOAT_KEYS + ("grid",):
        if key not in raw:
            raise ManifestError(f"missing key {key!r}")

    ints = {}
    for key in _INT_KEYS:
        try:
            ints[key] = int(raw[key])
        except ValueError:
            raise ManifestError(f"{key} must be an integer, got {raw[key]!r}") from None
        if ints[key] < 1:
            raise ManifestError(f"{key} must be ≥ 1, got {ints[key]}")
    floats = {}
    for key in _FLOAT_KEYS:
        try:
            floats[key] = float(raw[key])
        except ValueError:
            raise ManifestError(f"{key} must be a number, got {raw[key]!r}") from None
        if not np.isfinite(floats[key]) or floats[key] < 0:
            raise ManifestError(f"{key} must be finite and ≥ 0, got {raw[key]!r}")
    if floats["tr_ms"] <= floats["te_ms"]:
        raise ManifestError("tr_ms must exceed te_ms")
    try:
        grid = tuple(int(g) for g in raw["grid"].replace("x", ",").split(","))
    except ValueError:
        raise ManifestError(f"grid must be a comma list of integers, got {raw['grid']!r}") from None
    if len(grid) not in (2, 3) or min(grid) < 1:
        raise ManifestError(f"grid must have 2 or 3 positive entries, got {grid}")
    C, M, L, T, K = (ints[k] for k in _INT_KEYS)
    if K > T:
        raise ManifestError(f"K={K} exceeds T={T}")

    paths = {}
    for key in _PATH_KEYS + _OPTIONAL_PATH_KEYS:
        if key in raw:
            p = root / raw[key]
            if not p.is_file():
                raise ManifestError(f"{key}: file {p} does not exist")
            paths[key] = p

    hdr = {key: read_header(p) for key, p in paths.items()}
    d = len(grid)
    _expect("kspace", hdr["kspace"].shape, (C, M, L, T), ("C", "M", "L", "T"))
    if not np.issubdtype(hdr["kspace"].dtype, np.complexfloating):
        raise ManifestError("kspace must be complex")
    traj = hdr["trajectory"].shape
    if len(traj) == 3:
        _expect("trajectory", traj, (L, M, d), ("L", "M", "d"))
    else:
        _expect("trajectory", traj, (T, L, M, d), ("T", "L", "M", "d"))
    _expect("coils", hdr["coils"].shape, (C,) + grid, ("C",) + tuple(f"grid[{i}]" for i in range(d)))
    dcf = hdr["dcf"].shape
    if len(dcf) == 2:
        _expect("dcf", dcf, (L, M), ("L", "M"))
    else:
        _expect("dcf", dcf, (T, L, M), ("T", "L", "M"))
    _expect("basis", hdr["basis"].shape, (T, K), ("T", "K"))
    _expect("dictionary", hdr["dictionary"].shape, (None, T), ("D", "T"))
    _expect("flip_angles", hdr["flip_angles"].shape, (T,), ("T",))
    if "ref_qmaps" in hdr:
        _expect("ref_qmaps", hdr["ref_qmaps"].shape, (3,) + grid, ("maps",) + ("grid",) * d)
    if "mask" in hdr:
        _expect("mask", hdr["mask"].shape, grid, ("grid",) * d)
    if "ref_tsmi" in hdr:
        _expect("ref_tsmi", hdr["ref_tsmi"].shape, grid + (K,), ("grid",) * d + ("K",))

    known = set(_PATH_KEYS + _OPTIONAL_PATH_KEYS + _INT_KEYS + _FLOAT_KEYS + ("grid",))
    extra = {k: v for k, v in raw.items() if k not in known}
    return DatasetManifest(root, paths, C, M, L, T, K, grid, **floats, extra=extra)


def write_manifest(path, manifest: DatasetManifest) -> None:
    write_config(path, manifest.to_config(), header="mrfdip dataset manifest")
