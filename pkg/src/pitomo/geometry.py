"""Discretization grid, chord geometry, and contribution-matrix construction.

The contribution matrix holds, for every viewing chord, the path length of
that chord through every cell of a rectangular (z, r) grid.  Its rows act as
a linear operator turning a 2D emission field into line-integrated
measurements.  All geometry runs in double precision; chord tracing uses an
exact cell-boundary crossing traversal rather than sampling.

Conventions
-----------
* Cell (iz, ir) spans [r_min + ir*cw, r_min + (ir+1)*cw] x
  [z_min + iz*ch, z_min + (iz+1)*ch]; row 0 is the lowest-z row.
* Weight planes have shape (numz, numr), z outer, r inner.
* A segment running exactly along a cell boundary is assigned to the cell
  with the larger index (upper/right); if that cell falls outside the grid
  the segment contributes nothing.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyChordSet,
    FormatError,
    InvalidBounds,
    InvalidChord,
    InvalidCount,
    ShapeMismatch,
    ZeroRowWarning,
)

__all__ = [
    "Grid",
    "Chord",
    "ContributionMatrix",
    "build_grid",
    "trace_chord",
    "build_cmatrix",
    "forward_project",
    "load_chords_json",
    "save_chords_json",
]

DEFAULT_SUBRAYS = 5


@dataclass(frozen=True)
class Grid:
    """Rectangular (z, r) discretization of the plasma cross-section."""

    r_min: float
    r_max: float
    z_min: float
    z_max: float
    numr: int
    numz: int

    def __post_init__(self) -> None:
        if not (self.r_max > self.r_min):
            raise InvalidBounds(f"r_max ({self.r_max}) must exceed r_min ({self.r_min})")
        if not (self.z_max > self.z_min):
            raise InvalidBounds(f"z_max ({self.z_max}) must exceed z_min ({self.z_min})")
        if int(self.numr) != self.numr or self.numr < 1:
            raise InvalidCount(f"numr must be a positive integer, got {self.numr}")
        if int(self.numz) != self.numz or self.numz < 1:
            raise InvalidCount(f"numz must be a positive integer, got {self.numz}")

    @property
    def cell_width(self) -> float:
        return (self.r_max - self.r_min) / self.numr

    @property
    def cell_height(self) -> float:
        return (self.z_max - self.z_min) / self.numz

    @property
    def shape(self) -> tuple[int, int]:
        """(numz, numr) plane shape."""
        return (self.numz, self.numr)

    @property
    def n_cells(self) -> int:
        return self.numz * self.numr

    def cell_centers_r(self) -> np.ndarray:
        return self.r_min + (np.arange(self.numr, dtype=np.float64) + 0.5) * self.cell_width

    def cell_centers_z(self) -> np.ndarray:
        return self.z_min + (np.arange(self.numz, dtype=np.float64) + 0.5) * self.cell_height

    def to_dict(self) -> dict:
        return {
            "r_min": self.r_min,
            "r_max": self.r_max,
            "z_min": self.z_min,
            "z_max": self.z_max,
            "numr": self.numr,
            "numz": self.numz,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        try:
            return cls(
                r_min=float(d["r_min"]),
                r_max=float(d["r_max"]),
                z_min=float(d["z_min"]),
                z_max=float(d["z_max"]),
                numr=int(d["numr"]),
                numz=int(d["numz"]),
            )
        except KeyError as exc:
            raise FormatError(f"grid record missing key {exc}") from exc


def build_grid(
    r_min: float, r_max: float, z_min: float, z_max: float, numr: int, numz: int
) -> Grid:
    """Construct a validated Grid (see class docstring for cell layout)."""
    return Grid(r_min=r_min, r_max=r_max, z_min=z_min, z_max=z_max, numr=numr, numz=numz)


@dataclass(frozen=True)
class Chord:
    """Straight viewing line through the cross-section.

    ``start`` and ``end`` are (r, z) points in device units; ``beam_width``
    is the full transverse width of the beam (0 = infinitesimally thin).
    """

    start: tuple[float, float]
    end: tuple[float, float]
    beam_width: float = 0.0

    def __post_init__(self) -> None:
        if tuple(self.start) == tuple(self.end):
            raise InvalidChord(f"chord start and end coincide at {self.start}")
        if self.beam_width < 0:
            raise InvalidChord(f"beam_width must be >= 0, got {self.beam_width}")

    @property
    def length(self) -> float:
        return float(np.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1]))

    def to_dict(self) -> dict:
        return {
            "start": [self.start[0], self.start[1]],
            "end": [self.end[0], self.end[1]],
            "beam_width": self.beam_width,
        }


@dataclass(frozen=True)
class ContributionMatrix:
    """Per-chord path-weight tensor of shape (n, numz, numr).

    Row i sums to the in-grid path length of chord i (the mean over sub-rays
    for finite beam widths).  Entries are always >= 0.
    """

    weights: np.ndarray
    grid: Grid

    def __post_init__(self) -> None:
        w = self.weights
        if w.ndim != 3:
            raise ShapeMismatch(f"weights must be 3D (n, numz, numr), got shape {w.shape}")
        if w.shape[1:] != self.grid.shape:
            raise ShapeMismatch(
                f"weights plane shape {w.shape[1:]} does not match grid {self.grid.shape}"
            )
        if w.size and float(w.min()) < 0:
            raise ShapeMismatch("contribution weights must be non-negative")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def numz(self) -> int:
        return self.weights.shape[1]

    @property
    def numr(self) -> int:
        return self.weights.shape[2]

    def as_matrix(self) -> np.ndarray:
        """Flattened (n, numz*numr) row-operator view."""
        return self.weights.reshape(self.n, -1)

    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=(1, 2))

    def zero_rows(self) -> list[int]:
        """Indices of chords that never intersect the grid."""
        return [int(i) for i in np.flatnonzero(self.row_sums() == 0.0)]


def _trace_centerline(
    rel_r0: float,
    rel_z0: float,
    rel_r1: float,
    rel_z1: float,
    cw: float,
    ch: float,
    numr: int,
    numz: int,
) -> np.ndarray:
    """Exact cell-crossing trace of one ray given in grid-relative coordinates.

    Returns the (numz, numr) plane of per-cell path lengths.  Works entirely
    in coordinates relative to the grid origin so that translating grid and
    chord together cannot change the arithmetic.
    """
    plane = np.zeros((numz, numr), dtype=np.float64)
    dr = rel_r1 - rel_r0
    dz = rel_z1 - rel_z0
    length = np.hypot(dr, dz)

    # Clip the ray's parameter range to the grid bounding box (slab method).
    t_lo, t_hi = 0.0, 1.0
    for p0, dp, hi in ((rel_r0, dr, cw * numr), (rel_z0, dz, ch * numz)):
        if dp == 0.0:
            if p0 < 0.0 or p0 > hi:
                return plane
        else:
            ta = (0.0 - p0) / dp
            tb = (hi - p0) / dp
            if ta > tb:
                ta, tb = tb, ta
            t_lo = max(t_lo, ta)
            t_hi = min(t_hi, tb)
    if not t_hi > t_lo:
        return plane

    cuts = [np.array([t_lo, t_hi])]
    if dr != 0.0:
        a = (np.arange(numr + 1, dtype=np.float64) * cw - rel_r0) / dr
        cuts.append(a[(a > t_lo) & (a < t_hi)])
    if dz != 0.0:
        a = (np.arange(numz + 1, dtype=np.float64) * ch - rel_z0) / dz
        cuts.append(a[(a > t_lo) & (a < t_hi)])
    alphas = np.unique(np.concatenate(cuts))

    seg = np.diff(alphas) * length
    mids = 0.5 * (alphas[:-1] + alphas[1:])
    ir = np.floor((rel_r0 + mids * dr) / cw).astype(np.int64)
    iz = np.floor((rel_z0 + mids * dz) / ch).astype(np.int64)
    keep = (ir >= 0) & (ir < numr) & (iz >= 0) & (iz < numz) & (seg > 0)
    np.add.at(plane, (iz[keep], ir[keep]), seg[keep])
    return plane


def _subray_offsets(beam_width: float, subrays: int) -> np.ndarray:
    """Transverse offsets of the parallel sub-rays spanning the beam."""
    if beam_width == 0.0 or subrays == 1:
        return np.zeros(1, dtype=np.float64)
    return np.linspace(-0.5 * beam_width, 0.5 * beam_width, subrays)


def trace_chord(grid: Grid, chord: Chord, subrays: int = DEFAULT_SUBRAYS) -> np.ndarray:
    """Per-cell path lengths of one chord as a (numz, numr) float64 plane.

    A zero-width chord is traced exactly along its centerline.  A finite
    beam is approximated by ``subrays`` parallel rays spread uniformly
    across the width (offsets -w/2 .. +w/2), averaged.  A chord entirely
    outside the grid yields an all-zero plane.
    """
    if subrays < 1:
        raise InvalidCount(f"subrays must be >= 1, got {subrays}")
    r0 = chord.start[0] - grid.r_min
    z0 = chord.start[1] - grid.z_min
    r1 = chord.end[0] - grid.r_min
    z1 = chord.end[1] - grid.z_min
    dr = r1 - r0
    dz = z1 - z0
    length = np.hypot(dr, dz)
    nr, nz = -dz / length, dr / length  # unit normal to the chord direction

    acc = np.zeros(grid.shape, dtype=np.float64)
    offsets = _subray_offsets(chord.beam_width, subrays)
    for off in offsets:
        acc += _trace_centerline(
            r0 + off * nr,
            z0 + off * nz,
            r1 + off * nr,
            z1 + off * nz,
            grid.cell_width,
            grid.cell_height,
            grid.numr,
            grid.numz,
        )
    acc /= len(offsets)
    return acc


def build_cmatrix(
    grid: Grid,
    chords: list[Chord],
    subrays: int = DEFAULT_SUBRAYS,
    threads: int = 1,
) -> ContributionMatrix:
    """Stack per-chord trace planes into a (n, numz, numr) tensor.

    Chord order is preserved regardless of ``threads``.  Chords that miss
    the grid produce all-zero rows and a ZeroRowWarning naming them.
    """
    chords = list(chords)
    if not chords:
        raise EmptyChordSet("at least one chord is required")
    weights = np.zeros((len(chords), grid.numz, grid.numr), dtype=np.float64)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, plane in enumerate(
                pool.map(lambda c: trace_chord(grid, c, subrays), chords)
            ):
                weights[i] = plane
    else:
        for i, chord in enumerate(chords):
            weights[i] = trace_chord(grid, chord, subrays)
    cm = ContributionMatrix(weights=weights, grid=grid)
    zeros = cm.zero_rows()
    if zeros:
        warnings.warn(
            f"{len(zeros)} chord(s) never intersect the grid: rows {zeros}",
            ZeroRowWarning,
            stacklevel=2,
        )
    return cm


def forward_project(cmatrix: ContributionMatrix, field: np.ndarray) -> np.ndarray:
    """Line-integrate a field: x_i = sum over cells of row i times the field.

    ``field`` may be a flat vector of length numz*numr, a (numz, numr)
    plane, or a batch with one extra leading axis; the chord axis is last
    in the result.  Purely linear; no noise is added here.
    """
    field = np.asarray(field)
    zr = cmatrix.numz * cmatrix.numr
    if field.ndim == 2 and field.shape == cmatrix.grid.shape:
        flat = field.reshape(zr)
    elif field.ndim == 1:
        flat = field
    elif field.ndim == 2 and field.shape[1] == zr:
        flat = field
    elif field.ndim == 3 and field.shape[1:] == cmatrix.grid.shape:
        flat = field.reshape(field.shape[0], zr)
    else:
        raise ShapeMismatch(
            f"field shape {field.shape} incompatible with grid {cmatrix.grid.shape}"
        )
    if flat.ndim == 1 and flat.shape[0] != zr:
        raise ShapeMismatch(f"field length {flat.shape[0]} != numz*numr = {zr}")
    if not np.all(np.isfinite(flat)):
        raise ShapeMismatch("field entries must be finite")
    return flat @ cmatrix.as_matrix().T


def load_chords_json(path) -> list[Chord]:
    """Read a chord set from JSON: [{start:[r,z], end:[r,z], beam_width}, ...]."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"chords file {path} is not valid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise FormatError(f"chords file {path} must contain a JSON array")
    chords = []
    for i, rec in enumerate(records):
        try:
            chords.append(
                Chord(
                    start=(float(rec["start"][0]), float(rec["start"][1])),
                    end=(float(rec["end"][0]), float(rec["end"][1])),
                    beam_width=float(rec.get("beam_width", 0.0)),
                )
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise FormatError(f"chords file {path}, record {i}: {exc!r}") from exc
    return chords


def save_chords_json(chords: list[Chord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([c.to_dict() for c in chords], fh, indent=2)
        fh.write("\n")
