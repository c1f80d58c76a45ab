"""Hyperspectral cubes, wavelength grids, label masks and dataset manifests.

On disk a cube is a ``key=value`` text header (``.hdr``) next to a raw
band-sequential little-endian float payload (``.raw``). Masks are 8-bit
palette PNGs whose pixel values are class indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

WEEE_CLASSES = ("background", "Copper", "Brass", "Aluminum", "StainlessSteel", "WhiteCopper")
WEEE_RANGE_NM = (415.05, 1008.10)
WEEE_BANDS = 76

_DTYPES = {"f32le": "<f4", "f64le": "<f8"}
_REQUIRED_KEYS = ("samples", "lines", "bands", "dtype", "interleave")


class CubeFormatError(ValueError):
    """Base class for unreadable cube files."""


class HeaderError(CubeFormatError):
    pass


class PayloadSizeError(CubeFormatError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class WavelengthGrid:
    """Band centre wavelengths in nm.

    Either affine (``start_nm``, ``end_nm``, ``count``) or an explicit list,
    which is what remains after selecting a subset of channels.
    """

    start_nm: float
    end_nm: float
    count: int
    explicit: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.explicit is not None:
            wl = tuple(float(v) for v in self.explicit)
            object.__setattr__(self, "explicit", wl)
            if len(wl) != self.count or wl[0] != self.start_nm or wl[-1] != self.end_nm:
                raise ValueError("explicit wavelengths disagree with start/end/count")
            if any(b <= a for a, b in zip(wl, wl[1:])):
                raise ValueError("wavelengths must be strictly increasing")
            return
        if self.count < 2:
            raise ValueError("an affine grid needs at least 2 bands")
        if not self.start_nm < self.end_nm:
            raise ValueError(f"start_nm ({self.start_nm}) must be below end_nm ({self.end_nm})")

    @classmethod
    def affine(cls, start_nm: float, end_nm: float, count: int) -> "WavelengthGrid":
        return cls(float(start_nm), float(end_nm), int(count))

    @classmethod
    def from_list(cls, wavelengths: Sequence[float]) -> "WavelengthGrid":
        wl = tuple(float(v) for v in wavelengths)
        if not wl:
            raise ValueError("empty wavelength list")
        return cls(wl[0], wl[-1], len(wl), wl)

    @classmethod
    def weee(cls) -> "WavelengthGrid":
        return cls.affine(*WEEE_RANGE_NM, WEEE_BANDS)

    @property
    def is_affine(self) -> bool:
        return self.explicit is None

    @property
    def wavelengths(self) -> np.ndarray:
        return np.array([wavelength_of(self, i) for i in range(self.count)])

    def restrict(self, indices: Sequence[int]) -> "WavelengthGrid":
        return WavelengthGrid.from_list([wavelength_of(self, i) for i in indices])

    def to_dict(self) -> dict:
        if self.is_affine:
            return {"start_nm": self.start_nm, "end_nm": self.end_nm, "count": self.count}
        return {"wavelengths": list(self.explicit)}

    @classmethod
    def from_dict(cls, d: dict) -> "WavelengthGrid":
        if "wavelengths" in d:
            return cls.from_list(d["wavelengths"])
        return cls.affine(d["start_nm"], d["end_nm"], d["count"])

    def same_wavelengths(self, other: "WavelengthGrid") -> bool:
        return self.count == other.count and np.array_equal(self.wavelengths, other.wavelengths)


def wavelength_of(grid: WavelengthGrid, index: int) -> float:
    """Centre wavelength (nm) of band ``index``."""
    if not 0 <= index < grid.count:
        raise IndexError(f"band index {index} outside 0..{grid.count - 1}")
    if grid.explicit is not None:
        return grid.explicit[index]
    if index == grid.count - 1:
        return grid.end_nm
    return grid.start_nm + index * (grid.end_nm - grid.start_nm) / (grid.count - 1)


@dataclass(frozen=True, eq=False)
class HyperCube:
    values: np.ndarray  # [height, width, bands]
    grid: WavelengthGrid
    calibrated: bool = True

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"cube values must be 3-D [H, W, K], got shape {self.values.shape}")
        if self.values.shape[2] != self.grid.count:
            raise ValueError(f"cube has {self.values.shape[2]} bands but grid has {self.grid.count}")
        if min(self.values.shape) < 1:
            raise ValueError("cube dimensions must be positive")
        if self.calibrated and not np.all(np.isfinite(self.values)):
            raise ValueError("calibrated cube contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, HyperCube):
            return NotImplemented
        return (
            self.calibrated == other.calibrated
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
            and self.grid.same_wavelengths(other.grid)
        )


@dataclass(frozen=True, eq=False)
class LabelMask:
    labels: np.ndarray  # [height, width], class indices
    class_names: tuple[str, ...] = WEEE_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise ValueError(f"mask holds labels outside 0..{len(self.class_names) - 1}")
        object.__setattr__(self, "labels", labels.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.class_names == other.class_names and np.array_equal(self.labels, other.labels)


# -- cube IO -----------------------------------------------------------------


def _cube_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    header = path if path.suffix == ".hdr" else path.with_name(path.name + ".hdr")
    return header, header.with_suffix(".raw")


def read_header(path) -> dict:
    header_path, _ = _cube_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(f"cube header not found: {header_path}")
    fields = {}
    for lineno, line in enumerate(header_path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise HeaderError(f"{header_path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    missing = [k for k in _REQUIRED_KEYS if k not in fields]
    if missing:
        raise HeaderError(f"{header_path}: missing keys {missing}")
    if fields["interleave"] != "bsq":
        raise HeaderError(f"{header_path}: only bsq interleave is supported, got {fields['interleave']!r}")
    if fields["dtype"] not in _DTYPES:
        raise HeaderError(f"{header_path}: unsupported dtype {fields['dtype']!r}")
    try:
        dims = {k: int(fields[k]) for k in ("samples", "lines", "bands")}
        wavelengths = [float(v) for v in fields["wavelengths"].split(",")] if "wavelengths" in fields else None
        calibrated = bool(int(fields.get("calibrated", "1")))
    except ValueError as exc:
        raise HeaderError(f"{header_path}: {exc}") from None
    if min(dims.values()) < 1:
        raise HeaderError(f"{header_path}: dimensions must be positive")
    if wavelengths is not None and len(wavelengths) != dims["bands"]:
        raise HeaderError(f"{header_path}: {len(wavelengths)} wavelengths for {dims['bands']} bands")
    return {**dims, "dtype": fields["dtype"], "wavelengths": wavelengths, "calibrated": calibrated}


def load_cube(path) -> HyperCube:
    header = read_header(path)
    _, raw_path = _cube_paths(path)
    if not raw_path.exists():
        raise FileNotFoundError(f"cube payload not found: {raw_path}")
    dtype = np.dtype(_DTYPES[header["dtype"]])
    h, w, k = header["lines"], header["samples"], header["bands"]
    expected = h * w * k * dtype.itemsize
    actual = raw_path.stat().st_size
    if actual != expected:
        raise PayloadSizeError(
            f"{raw_path}: payload is {actual} bytes, header {h}x{w}x{k} {header['dtype']} needs {expected}"
        )
    bsq = np.fromfile(raw_path, dtype=dtype).reshape(k, h, w)
    values = np.ascontiguousarray(bsq.transpose(1, 2, 0)).astype(dtype.newbyteorder("="))
    wl = header["wavelengths"]
    if wl is None:
        grid = WavelengthGrid.from_list([float(i) for i in range(k)])
    else:
        grid = WavelengthGrid.from_list(wl)
    return HyperCube(values, grid, header["calibrated"])


def save_cube(cube: HyperCube, path) -> Path:
    """Write ``cube`` as header + BSQ payload; returns the header path.

    float64 cubes are stored as ``f64le`` and everything else as ``f32le``,
    so a round trip through :func:`load_cube` is bit-exact.
    """
    if not np.all(np.isfinite(cube.values)):
        raise ValueError("refusing to save a cube with non-finite values")
    header_path, raw_path = _cube_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    tag = "f64le" if cube.values.dtype == np.float64 else "f32le"
    lines = [
        f"samples={cube.width}",
        f"lines={cube.height}",
        f"bands={cube.bands}",
        f"dtype={tag}",
        "interleave=bsq",
        "wavelengths=" + ",".join(repr(float(v)) for v in cube.grid.wavelengths),
        f"calibrated={int(cube.calibrated)}",
    ]
    header_path.write_text("\n".join(lines) + "\n")
    bsq = np.ascontiguousarray(cube.values.transpose(2, 0, 1), dtype=_DTYPES[tag])
    bsq.tofile(raw_path)
    return header_path


def select_channels(cube: HyperCube, indices: Sequence[int]) -> HyperCube:
    """Keep only the listed bands, in the given (strictly increasing) order."""
    idx = [int(i) for i in indices]
    if not idx:
        raise ValueError("no channels selected")
    for a, b in zip(idx, idx[1:]):
        if b <= a:
            raise ValueError(f"channel indices must be strictly increasing, got {a} then {b}")
    if idx[0] < 0 or idx[-1] >= cube.bands:
        raise ValueError(f"channel indices must lie in 0..{cube.bands - 1}, got {idx}")
    if idx == list(range(cube.bands)):
        return cube
    return HyperCube(np.ascontiguousarray(cube.values[:, :, idx]), cube.grid.restrict(idx), cube.calibrated)


# -- masks ---------------------------------------------------------------------

# Distinct colours for the palette; index i is drawn with _PALETTE[i].
_PALETTE = [
    (0, 0, 0), (184, 115, 51), (181, 166, 66), (169, 172, 182), (96, 96, 160), (230, 230, 210),
    (200, 40, 40), (40, 160, 60), (40, 80, 200), (220, 180, 20), (150, 60, 170), (20, 170, 170),
]


def save_mask(mask: LabelMask, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(mask.labels, mode="P")
    palette = [c for rgb in _PALETTE for c in rgb]
    img.putpalette(palette + [0] * (768 - len(palette)))
    img.save(path, format="PNG")
    return path


def load_mask(path, class_names: Sequence[str] = WEEE_CLASSES) -> LabelMask:
    with Image.open(path) as img:
        if img.mode not in ("P", "L"):
            raise ValueError(f"{path}: mask must be an 8-bit single-channel image, got mode {img.mode}")
        labels = np.array(img)
    return LabelMask(labels, tuple(class_names))


def mask_size(path) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.height, img.width


# -- manifests -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    cube: Path
    mask: Path
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    grid: WavelengthGrid
    class_names: tuple[str, ...] = WEEE_CLASSES
    root: Path = field(default=Path("."), compare=False)

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    root = path.parent
    doc = {
        "grid": manifest.grid.to_dict(),
        "class_names": list(manifest.class_names),
        "entries": [
            {"cube": _relpath(e.cube, root), "mask": _relpath(e.mask, root), "split": e.split}
            for e in manifest.entries
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _relpath(p: Path, root: Path) -> str:
    try:
        return Path(p).resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(p)


def load_manifest(path, check: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        grid = WavelengthGrid.from_dict(doc["grid"])
        names = tuple(doc["class_names"])
        raw_entries = doc["entries"]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from None
    entries = []
    for i, e in enumerate(raw_entries):
        if e.get("split") not in ("train", "test"):
            raise ManifestError(f"{path}: entry {i} has split {e.get('split')!r}; expected train or test")
        entries.append(ManifestEntry(path.parent / e["cube"], path.parent / e["mask"], e["split"]))
    manifest = DatasetManifest(tuple(entries), grid, names, path.parent)
    if check:
        for e in entries:
            header_path, raw_path = _cube_paths(e.cube)
            for p in (header_path, raw_path, e.mask):
                if not p.exists():
                    raise ManifestError(f"{path}: referenced file missing: {p}")
            h = read_header(e.cube)
            if (h["lines"], h["samples"]) != mask_size(e.mask):
                raise ManifestError(
                    f"{path}: {e.cube.name} is {h['lines']}x{h['samples']} but its mask is "
                    f"{'x'.join(map(str, mask_size(e.mask)))}"
                )
            if h["bands"] != grid.count:
                raise ManifestError(f"{path}: {e.cube.name} has {h['bands']} bands, manifest grid {grid.count}")
    return manifest


def load_entry(entry: ManifestEntry, class_names: Sequence[str]) -> tuple[HyperCube, LabelMask]:
    return load_cube(entry.cube), load_mask(entry.mask, class_names)
