"""Reflectance calibration against white and dark Spectralon references."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .hypercube import HyperCube

EPSILON = 1e-6


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ReferencePair:
    """White and dark reference measurements, full-frame or ``1x1xK``."""

    white: HyperCube
    dark: HyperCube

    def __post_init__(self):
        if self.white.values.shape != self.dark.values.shape:
            raise CalibrationError(
                f"white {self.white.values.shape} and dark {self.dark.values.shape} references differ in shape"
            )


@dataclass(frozen=True)
class CalibrationReport:
    invalid_pixel_count: int = 0
    clipped_low: int = 0
    clipped_high: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def calibrate(
    raw: HyperCube, refs: ReferencePair, clip: bool = True, eps: float = EPSILON
) -> tuple[HyperCube, CalibrationReport]:
    """Convert raw intensities to reflectance ``(L - dark) / (white - dark)``.

    Elements whose reference span ``|white - dark|`` is below ``eps`` are set
    to 0 and counted as invalid. With ``clip`` the valid results are clamped
    to [0, 1] and the clamped elements are counted.
    """
    if raw.calibrated:
        raise CalibrationError("input cube is already calibrated")
    shape = raw.values.shape
    ref_shape = refs.white.values.shape
    if ref_shape != shape and ref_shape != (1, 1, shape[2]):
        raise CalibrationError(f"references of shape {ref_shape} do not match cube {shape} or (1, 1, {shape[2]})")

    L = raw.values.astype(np.float64)
    white = refs.white.values.astype(np.float64)
    dark = refs.dark.values.astype(np.float64)
    span = np.broadcast_to(white - dark, shape)
    valid = np.abs(span) >= eps

    out = np.zeros(shape, dtype=np.float64)
    np.divide(L - dark, span, out=out, where=valid)
    low = high = 0
    if clip:
        low = int(np.count_nonzero(valid & (out < 0)))
        high = int(np.count_nonzero(valid & (out > 1)))
        np.clip(out, 0.0, 1.0, out=out)
    if not np.all(np.isfinite(out)):
        raise CalibrationError("raw cube contains non-finite intensities")
    report = CalibrationReport(int(np.count_nonzero(~valid)), low, high)
    return HyperCube(out, raw.grid, calibrated=True), report
