"""Seeded synthetic hyperspectral scenes for desk-scale experiments.

A scene is a Voronoi partition of random sites, one class per cell. Each
class has a spectral signature (a sum of Gaussian bumps over wavelength) and
a spatial texture that modulates the signature by ``+-amplitude``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .hypercube import (
    WEEE_RANGE_NM, DatasetManifest, HyperCube, LabelMask, ManifestEntry, WavelengthGrid, save_cube, save_manifest,
    save_mask,
)


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bump:
    center_nm: float
    width_nm: float  # standard deviation
    amplitude: float


@dataclass(frozen=True)
class Texture:
    kind: str = "flat"  # flat | checker | stripes
    period: int = 2
    orientation: str = "horizontal"
    amplitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ("flat", "checker", "stripes"):
            raise ValueError(f"unknown texture {self.kind!r}")
        if self.kind != "flat" and self.period < 2:
            raise ValueError("texture period must be >= 2")
        if self.orientation not in ("horizontal", "vertical"):
            raise ValueError(f"unknown stripe orientation {self.orientation!r}")

    def pattern(self, height: int, width: int) -> np.ndarray:
        """+-1 sign field (zeros for flat)."""
        if self.kind == "flat":
            return np.zeros((height, width))
        half = self.period / 2
        rows = np.floor(np.arange(height) / half).astype(int)[:, None]
        cols = np.floor(np.arange(width) / half).astype(int)[None, :]
        if self.kind == "checker":
            parity = (rows + cols) % 2
        elif self.orientation == "horizontal":
            parity = np.broadcast_to(rows % 2, (height, width))
        else:
            parity = np.broadcast_to(cols % 2, (height, width))
        return np.where(parity == 0, 1.0, -1.0)


@dataclass(frozen=True)
class ClassSpec:
    name: str
    bumps: tuple[Bump, ...]
    texture: Texture = Texture()

    def signature(self, wavelengths: np.ndarray) -> np.ndarray:
        sig = np.zeros_like(wavelengths, dtype=np.float64)
        for b in self.bumps:
            sig += b.amplitude * np.exp(-0.5 * ((wavelengths - b.center_nm) / b.width_nm) ** 2)
        return np.clip(sig, 0.0, 1.0)


@dataclass(frozen=True)
class SynthConfig:
    classes: tuple[ClassSpec, ...]
    height: int = 64
    width: int = 64
    bands: int = 16
    noise_sigma: float = 0.02
    seed: int = 0
    start_nm: float = WEEE_RANGE_NM[0]
    end_nm: float = WEEE_RANGE_NM[1]
    sites: int = 12
    min_fraction: float = 0.02
    max_retries: int = 100

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.sites < len(self.classes):
            raise ValueError("need at least one Voronoi site per class")

    @property
    def grid(self) -> WavelengthGrid:
        return WavelengthGrid.affine(self.start_nm, self.end_nm, self.bands)

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        classes = []
        for c in d.pop("classes"):
            classes.append(ClassSpec(
                c["name"],
                tuple(Bump(**b) for b in c["bumps"]),
                Texture(**c.get("texture", {})),
            ))
        return cls(tuple(classes), **d)


def _layout(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    h, w, n = config.height, config.width, len(config.classes)
    yy, xx = np.mgrid[0:h, 0:w]
    need = int(np.ceil(config.min_fraction * h * w))
    for _ in range(config.max_retries):
        sites = rng.uniform(0, 1, size=(config.sites, 2)) * [h, w]
        owners = np.concatenate([rng.permutation(n), rng.integers(0, n, config.sites - n)])
        d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
        labels = owners[d2.argmin(axis=-1)]
        if np.bincount(labels.ravel(), minlength=n).min() >= need:
            return labels.astype(np.uint8)
    raise SynthesisError(
        f"could not give every class {config.min_fraction:.0%} of the scene in {config.max_retries} attempts"
    )


def generate_with(config: SynthConfig, rng: np.random.Generator) -> tuple[HyperCube, LabelMask]:
    labels = _layout(config, rng)
    grid = config.grid
    wl = grid.wavelengths
    h, w = labels.shape
    values = np.zeros((h, w, config.bands))
    for idx, cls in enumerate(config.classes):
        sel = labels == idx
        mod = 1.0 + cls.texture.amplitude * cls.texture.pattern(h, w)[sel]
        values[sel] = cls.signature(wl)[None, :] * mod[:, None]
    if config.noise_sigma > 0:
        values += rng.normal(0.0, config.noise_sigma, size=values.shape)
    values = np.clip(values, 0.0, 1.0).astype(np.float32)
    return HyperCube(values, grid, calibrated=True), LabelMask(labels, config.class_names)


def generate(config: SynthConfig) -> tuple[HyperCube, LabelMask]:
    """One scene, fully determined by ``config.seed``."""
    return generate_with(config, np.random.default_rng(config.seed))


def generate_dataset(config: SynthConfig, out_dir, train_scenes: int = 2, test_scenes: int = 1) -> Path:
    """Write ``train_scenes + test_scenes`` scenes plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    streams = np.random.SeedSequence(config.seed).spawn(train_scenes + test_scenes)
    entries = []
    for i, ss in enumerate(streams):
        split = "train" if i < train_scenes else "test"
        cube, mask = generate_with(config, np.random.default_rng(ss))
        stem = f"scene{i:03d}"
        entries.append(ManifestEntry(save_cube(cube, out_dir / f"{stem}.hdr"),
                                     save_mask(mask, out_dir / f"{stem}_mask.png"), split))
    (out_dir / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return save_manifest(DatasetManifest(tuple(entries), config.grid, config.class_names), out_dir / "manifest.json")


# -- presets -------------------------------------------------------------------

_BACKGROUND = ClassSpec("background", (Bump(600.0, 300.0, 0.12),))
_TWIN_SIGNATURE = (Bump(550.0, 80.0, 0.45), Bump(850.0, 60.0, 0.3))


def texture_twins(seed: int = 0, amplitude: float = 0.3, noise_sigma: float = 0.02, **kw) -> SynthConfig:
    """Background, two classes sharing one signature, and one spectrally distinct class.

    The twins use fine (period 2) and coarse (period 8) checkerboards of the
    same amplitude, so every pixel of either twin is drawn from the same
    distribution: only spatial context tells them apart.
    """
    return SynthConfig(
        classes=(
            _BACKGROUND,
            ClassSpec("twin_fine", _TWIN_SIGNATURE, Texture("checker", 2, amplitude=amplitude)),
            ClassSpec("twin_coarse", _TWIN_SIGNATURE, Texture("checker", 8, amplitude=amplitude)),
            ClassSpec("distinct", (Bump(700.0, 60.0, 0.6),)),
        ),
        noise_sigma=noise_sigma,
        seed=seed,
        **kw,
    )


def checker_vs_flat(seed: int = 0, amplitude: float = 0.3, noise_sigma: float = 0.02, **kw) -> SynthConfig:
    """Two classes with one signature: a period-2 checkerboard and a flat texture."""
    return SynthConfig(
        classes=(
            ClassSpec("flat", _TWIN_SIGNATURE),
            ClassSpec("checker", _TWIN_SIGNATURE, Texture("checker", 2, amplitude=amplitude)),
        ),
        noise_sigma=noise_sigma,
        seed=seed,
        **kw,
    )


def narrow_bands(seed: int = 0, noise_sigma: float = 0.02, **kw) -> SynthConfig:
    """Classes sharing a broad visible signature and differing only in narrow near-infrared bumps."""
    base = (Bump(560.0, 90.0, 0.4),)
    return SynthConfig(
        classes=(
            _BACKGROUND,
            ClassSpec("nir810", base + (Bump(810.0, 15.0, 0.35),)),
            ClassSpec("nir890", base + (Bump(890.0, 15.0, 0.35),)),
            ClassSpec("nir970", base + (Bump(970.0, 15.0, 0.35),)),
        ),
        noise_sigma=noise_sigma,
        seed=seed,
        **kw,
    )


PRESETS = {"texture-twins": texture_twins, "checker-vs-flat": checker_vs_flat, "narrow-bands": narrow_bands}
