"""Shared domain types: raster grids, datasets, result records, matrix text IO.

Positions are physical nanometers, not pixel indices, so length-scale
hyperparameters carry units. All types are immutable values after
construction; arrays are frozen (writeable = False).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

NEGATIVE = "negative"
POSITIVE = "positive"
POLARITIES = (NEGATIVE, POSITIVE)

# Tolerance for "this position lies on the grid" checks, in nanometers.
GRID_TOL = 1e-9


def _frozen_array(a, dtype=float, ndim=None) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    if ndim is not None and out.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class GridSpec:
    """Rectangular raster grid.

    Pixel (i, j), 0 <= i < nx, 0 <= j < ny, sits at (i*pitch_x, j*pitch_y).
    Lines are indexed by j (slow axis), columns by i (fast axis).
    """

    nx: int
    ny: int
    pitch_x: float = 1.0
    pitch_y: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one pixel per axis")
        if self.pitch_x <= 0 or self.pitch_y <= 0:
            raise ValueError("pixel pitches must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols) = (ny, nx)."""
        return (self.ny, self.nx)

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    def x_coords(self) -> np.ndarray:
        return np.arange(self.nx) * self.pitch_x

    def y_coords(self) -> np.ndarray:
        return np.arange(self.ny) * self.pitch_y

    def line_positions(self, j: int) -> np.ndarray:
        """Positions of all nx pixels of line j, ascending x. Shape (nx, 2)."""
        if not 0 <= j < self.ny:
            raise ValueError(f"line index {j} outside grid with ny={self.ny}")
        out = np.empty((self.nx, 2))
        out[:, 0] = self.x_coords()
        out[:, 1] = j * self.pitch_y
        return out


def raster_positions(grid: GridSpec) -> np.ndarray:
    """All nx*ny pixel positions in acquisition order.

    Line-major, ascending x within a line (forward data-acquisition pass
    only). Shape (nx*ny, 2).
    """
    xs = grid.x_coords()
    ys = grid.y_coords()
    out = np.empty((grid.n_pixels, 2))
    out[:, 0] = np.tile(xs, grid.ny)
    out[:, 1] = np.repeat(ys, grid.nx)
    return out


def mse(image: np.ndarray, reference: np.ndarray) -> float:
    """Mean of squared elementwise differences."""
    image = np.asarray(image, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if image.shape != reference.shape:
        raise ValueError(
            f"dimension mismatch: {image.shape} vs {reference.shape}")
    return float(np.mean((image - reference) ** 2))


@dataclass(frozen=True)
class SamplePoint:
    """One measurement: tip position (x, y) in nm, tracked dip voltage in V."""

    input: tuple[float, float]
    target: float

    def on_grid(self, grid: GridSpec) -> bool:
        x, y = self.input
        i = round(x / grid.pitch_x)
        j = round(y / grid.pitch_y)
        if not (0 <= i < grid.nx and 0 <= j < grid.ny):
            return False
        return (abs(x - i * grid.pitch_x) <= GRID_TOL
                and abs(y - j * grid.pitch_y) <= GRID_TOL)


@dataclass(frozen=True)
class Dataset:
    """Ordered training pairs in acquisition order, one polarity per set."""

    inputs: np.ndarray   # (n, 2)
    targets: np.ndarray  # (n,)
    polarity: str = NEGATIVE

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if inputs.size == 0:
            inputs = inputs.reshape(0, 2)
        targets = np.atleast_1d(np.asarray(self.targets, dtype=float))
        if inputs.shape[0] != targets.shape[0]:
            raise ValueError("inputs and targets disagree in length")
        if inputs.shape[1] != 2:
            raise ValueError("inputs must be 2-vectors (x, y)")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")
        object.__setattr__(self, "inputs", _frozen_array(inputs, ndim=2))
        object.__setattr__(self, "targets", _frozen_array(targets, ndim=1))

    @classmethod
    def empty(cls, polarity: str = NEGATIVE) -> "Dataset":
        return cls(np.empty((0, 2)), np.empty(0), polarity)

    @classmethod
    def from_points(cls, points: Iterable[SamplePoint],
                    polarity: str = NEGATIVE) -> "Dataset":
        pts = list(points)
        inputs = np.array([p.input for p in pts], dtype=float).reshape(-1, 2)
        targets = np.array([p.target for p in pts], dtype=float)
        return cls(inputs, targets, polarity)

    @property
    def points(self) -> list[SamplePoint]:
        return [SamplePoint((float(x), float(y)), float(t))
                for (x, y), t in zip(self.inputs, self.targets)]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def append(self, point: SamplePoint) -> "Dataset":
        inputs = np.vstack([self.inputs, np.asarray(point.input, float)])
        targets = np.append(self.targets, point.target)
        return Dataset(inputs, targets, self.polarity)

    def tail(self, k: int) -> "Dataset":
        """The k most recent points."""
        if k >= len(self):
            return self
        return Dataset(self.inputs[-k:], self.targets[-k:], self.polarity)

    def take(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.polarity)


@dataclass(frozen=True)
class ScanResult:
    """Outcome of one simulated scan."""

    image: np.ndarray           # (ny, nx) tracked voltages, V
    lock_map: np.ndarray        # (ny, nx) bool, dip lock kept at that pixel
    line_compute_s: np.ndarray  # (ny,) per-line compute wall time, s
    aborted: bool = False
    abort_line: Optional[int] = None
    # Optional in-memory diagnostics (per-sample logs); never serialized.
    sample_log: Optional[dict] = None

    def __post_init__(self):
        image = _frozen_array(self.image, ndim=2)
        lock = _frozen_array(self.lock_map, dtype=bool, ndim=2)
        timing = _frozen_array(self.line_compute_s, ndim=1)
        if image.shape != lock.shape:
            raise ValueError("image and lock_map dimensions differ")
        if timing.shape[0] != image.shape[0]:
            raise ValueError("one compute duration per line required")
        if self.aborted:
            if self.abort_line is None:
                raise ValueError("aborted result needs an abort line index")
            if lock[self.abort_line + 1:].any():
                raise ValueError("lines after the abort index must be unlocked")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "lock_map", lock)
        object.__setattr__(self, "line_compute_s", timing)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


# ---------------------------------------------------------------------------
# Plain-text matrix format: first line "rows cols", one whitespace-separated
# row per line, 17 significant digits (lossless for float64).
# ---------------------------------------------------------------------------

def format_matrix(mat: np.ndarray) -> str:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    lines = [f"{mat.shape[0]} {mat.shape[1]}"]
    for row in mat:
        lines.append(" ".join("%.17g" % v for v in row))
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty matrix text")
    rows, cols = (int(tok) for tok in lines[0].split())
    if len(lines) - 1 != rows:
        raise ValueError(f"expected {rows} rows, found {len(lines) - 1}")
    mat = np.array([[float(tok) for tok in ln.split()] for ln in lines[1:]])
    if mat.shape != (rows, cols):
        raise ValueError(f"row width mismatch: header says {cols} columns")
    return mat


def write_matrix(path, mat: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(format_matrix(mat))


def read_matrix(path) -> np.ndarray:
    with open(path) as fh:
        return parse_matrix(fh.read())
