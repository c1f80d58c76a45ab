"""Band subsets for the all / uniformly spaced / RGB-nearest experiments."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import numpy as np

from .hypercube import WavelengthGrid, wavelength_of

DEFAULT_RGB_NM = (465.0, 550.0, 630.0)


class BandSelectionError(ValueError):
    pass


@dataclass(frozen=True)
class BandStrategy:
    kind: str  # "all" | "uniform" | "rgb"
    k: int = 0
    targets_nm: tuple[float, ...] = DEFAULT_RGB_NM

    @classmethod
    def all(cls) -> "BandStrategy":
        return cls("all")

    @classmethod
    def uniform(cls, k: int) -> "BandStrategy":
        if k < 2:
            raise BandSelectionError(f"uniform selection needs k >= 2, got {k}")
        return cls("uniform", int(k))

    @classmethod
    def rgb(cls, targets_nm=DEFAULT_RGB_NM) -> "BandStrategy":
        targets = tuple(float(t) for t in targets_nm)
        if len(targets) != 3:
            raise BandSelectionError(f"rgb selection needs three target wavelengths, got {len(targets)}")
        return cls("rgb", 0, targets)

    @classmethod
    def parse(cls, text: str) -> "BandStrategy":
        """Parse ``all``, ``uniform:K`` or ``rgb:l1,l2,l3`` (``rgb`` alone uses the defaults)."""
        name, _, arg = text.strip().partition(":")
        name = name.lower()
        try:
            if name == "all" and not arg:
                return cls.all()
            if name == "uniform":
                return cls.uniform(int(arg))
            if name == "rgb":
                return cls.rgb([float(v) for v in arg.split(",")] if arg else DEFAULT_RGB_NM)
        except ValueError as exc:
            raise BandSelectionError(f"bad band strategy {text!r}: {exc}") from None
        raise BandSelectionError(f"bad band strategy {text!r}; expected all, uniform:K or rgb:l1,l2,l3")

    def __str__(self) -> str:
        if self.kind == "uniform":
            return f"uniform:{self.k}"
        if self.kind == "rgb":
            return "rgb:" + ",".join(f"{t:g}" for t in self.targets_nm)
        return "all"


def _round_half_up(x: Fraction) -> int:
    return int((Decimal(x.numerator) / Decimal(x.denominator)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def select_bands(grid: WavelengthGrid, strategy: BandStrategy) -> list[int]:
    """Strictly increasing band indices for ``strategy`` on ``grid``."""
    n = grid.count
    if strategy.kind == "all":
        return list(range(n))

    if strategy.kind == "uniform":
        k = strategy.k
        if k > n:
            raise BandSelectionError(f"cannot pick {k} uniform bands from a {n}-band grid")
        idx = [_round_half_up(Fraction(j * (n - 1), k - 1)) for j in range(k)]
    elif strategy.kind == "rgb":
        lo, hi = wavelength_of(grid, 0), wavelength_of(grid, n - 1)
        wl = grid.wavelengths
        idx = []
        for t in sorted(strategy.targets_nm):
            if not lo <= t <= hi:
                raise BandSelectionError(f"target {t} nm outside grid range [{lo}, {hi}]")
            idx.append(int(np.argmin(np.abs(wl - t))))
    else:
        raise BandSelectionError(f"unknown strategy kind {strategy.kind!r}")

    for a, b in zip(idx, idx[1:]):
        if b <= a:
            raise BandSelectionError(f"{strategy} maps two picks onto band {a} (indices {a}, {b})")
    return idx
