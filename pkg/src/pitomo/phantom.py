"""Synthetic field generator: peaked smooth fields with exact measurements.

Each sample places one rotated elliptical Gaussian peak on the grid and
computes its chord measurements through the contribution matrix, so the
label/measurement pair is free of algorithm error by construction.  Noise,
when requested, is injected additively on the measurements afterwards.

Randomness is counter-based per sample: sample j draws everything from a
Philox stream keyed by ``base_seed + j``, so results are bit-identical no
matter how generation is scheduled.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datastore import Dataset, DatasetManifest
from .errors import InvalidCount, InvalidRule, ShapeMismatch
from .geometry import ContributionMatrix, Grid, forward_project

__all__ = [
    "PhantomRule",
    "NoiseSpec",
    "PeakParams",
    "PhantomSample",
    "draw_peak_params",
    "evaluate_peak",
    "sample_field",
    "generate_sample",
    "generate_dataset",
]


@dataclass(frozen=True)
class PhantomRule:
    """Distribution the random peaks are drawn from.

    ``sigma_range`` is in fractions of the smaller grid span.  ``margin``
    keeps peak centers away from the boundary: only cells whose centers lie
    at least ``margin`` of each span inside the grid are eligible.
    """

    kind: str = "gaussian_peak"
    amplitude_range: tuple[float, float] = (0.5, 2.0)
    sigma_range: tuple[float, float] = (0.08, 0.25)
    ellipticity_range: tuple[float, float] = (1.0, 2.0)
    margin: float = 0.1

    def __post_init__(self) -> None:
        if self.kind != "gaussian_peak":
            raise InvalidRule(f"unknown phantom rule kind {self.kind!r}")
        for name, (lo, hi) in (
            ("amplitude_range", self.amplitude_range),
            ("sigma_range", self.sigma_range),
            ("ellipticity_range", self.ellipticity_range),
        ):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise InvalidRule(f"{name} must be ordered finite bounds, got ({lo}, {hi})")
        if self.amplitude_range[0] <= 0:
            raise InvalidRule("amplitudes must be positive")
        if self.sigma_range[0] <= 0:
            raise InvalidRule("sigma fractions must be positive")
        if self.ellipticity_range[0] < 1.0:
            raise InvalidRule("ellipticity (axis ratio) must be >= 1")
        if not 0.0 <= self.margin < 0.5:
            raise InvalidRule(f"margin must be in [0, 0.5), got {self.margin}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "amplitude_range": list(self.amplitude_range),
            "sigma_range": list(self.sigma_range),
            "ellipticity_range": list(self.ellipticity_range),
            "margin": self.margin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomRule":
        try:
            return cls(
                kind=str(d.get("kind", "gaussian_peak")),
                amplitude_range=tuple(float(v) for v in d["amplitude_range"]),
                sigma_range=tuple(float(v) for v in d["sigma_range"]),
                ellipticity_range=tuple(float(v) for v in d["ellipticity_range"]),
                margin=float(d.get("margin", 0.1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidRule(f"invalid phantom rule config: {exc!r}") from exc


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise model: none, or Gaussian relative to x_max."""

    kind: str = "none"
    level: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "gaussian_relative"):
            raise InvalidRule(f"unknown noise kind {self.kind!r}")
        if not (np.isfinite(self.level) and self.level >= 0.0):
            raise InvalidRule(f"noise level must be a finite non-negative fraction, got {self.level}")

    @property
    def effective_level(self) -> float:
        return 0.0 if self.kind == "none" else self.level

    def to_dict(self) -> dict:
        return {"kind": self.kind, "level": self.level}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        try:
            return cls(kind=str(d.get("kind", "none")), level=float(d.get("level", 0.0)))
        except (TypeError, ValueError) as exc:
            raise InvalidRule(f"invalid noise config: {exc!r}") from exc


@dataclass(frozen=True)
class PeakParams:
    """One drawn peak: center, height, width, shape, orientation.

    ``sigma`` is absolute (grid units); ``theta`` rotates the major axis;
    ``ellipticity`` is the major/minor axis ratio applied to the minor axis.
    """

    r0: float
    z0: float
    amplitude: float
    sigma: float
    ellipticity: float
    theta: float


@dataclass(frozen=True)
class PhantomSample:
    """One generated sample: flat field, measurements, and its seed."""

    field: np.ndarray
    measurements: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        if self.field.ndim != 1:
            raise ShapeMismatch(f"sample field must be flat, got shape {self.field.shape}")
        if np.min(self.field) < 0.0 or np.max(self.field) <= 0.0:
            raise InvalidRule("sample field must be non-negative with a positive maximum")


def draw_peak_params(grid: Grid, rule: PhantomRule, rng: np.random.Generator) -> PeakParams:
    """Draw one peak from the rule, consuming a fixed number of variates.

    Center cell uniform over the interior (margin-eligible) cells; amplitude,
    sigma fraction, and ellipticity uniform over their ranges; rotation
    uniform over [0, pi).  Draw order is part of the format: cell indices,
    then amplitude, sigma, ellipticity, theta.
    """
    span_r = grid.r_max - grid.r_min
    span_z = grid.z_max - grid.z_min
    centers_r = grid.cell_centers_r()
    centers_z = grid.cell_centers_z()
    ok_r = np.flatnonzero(
        (centers_r >= grid.r_min + rule.margin * span_r)
        & (centers_r <= grid.r_max - rule.margin * span_r)
    )
    ok_z = np.flatnonzero(
        (centers_z >= grid.z_min + rule.margin * span_z)
        & (centers_z <= grid.z_max - rule.margin * span_z)
    )
    if ok_r.size == 0 or ok_z.size == 0:
        raise InvalidRule(f"margin {rule.margin} leaves no eligible center cells on {grid.shape}")
    ir = int(ok_r[rng.integers(ok_r.size)])
    iz = int(ok_z[rng.integers(ok_z.size)])
    a_lo, a_hi = rule.amplitude_range
    s_lo, s_hi = rule.sigma_range
    e_lo, e_hi = rule.ellipticity_range
    return PeakParams(
        r0=float(centers_r[ir]),
        z0=float(centers_z[iz]),
        amplitude=float(rng.uniform(a_lo, a_hi)),
        sigma=float(rng.uniform(s_lo, s_hi)) * min(span_r, span_z),
        ellipticity=float(rng.uniform(e_lo, e_hi)),
        theta=float(rng.uniform(0.0, np.pi)),
    )


def evaluate_peak(grid: Grid, params: PeakParams) -> np.ndarray:
    """Closed-form peak value at every cell center, shape (numz, numr).

    Squared elliptic distance: rotate the offset by -theta so u runs along
    the major axis, then d^2 = u^2 + (e*v)^2 and the value is
    A * exp(-d^2 / (2 sigma^2)).
    """
    dr = grid.cell_centers_r()[None, :] - params.r0
    dz = grid.cell_centers_z()[:, None] - params.z0
    cos_t, sin_t = np.cos(params.theta), np.sin(params.theta)
    u = cos_t * dr + sin_t * dz
    v = -sin_t * dr + cos_t * dz
    d2 = u**2 + (params.ellipticity * v) ** 2
    return params.amplitude * np.exp(-d2 / (2.0 * params.sigma**2))


def _rng_for(seed: int) -> np.random.Generator:
    # Philox is counter-based: sample streams are independent by key, so
    # generation order and thread count cannot change the output.
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def sample_field(grid: Grid, rule: PhantomRule, seed: int) -> np.ndarray:
    """Generate one field plane (numz, numr) in float64 for a given seed."""
    return evaluate_peak(grid, draw_peak_params(grid, rule, _rng_for(seed)))


def generate_sample(
    grid: Grid,
    cmatrix: ContributionMatrix,
    rule: PhantomRule,
    noise: NoiseSpec,
    seed: int,
) -> PhantomSample:
    """Generate one sample: field, exact measurements, then optional noise.

    The noise variates come from the same per-seed stream, drawn after the
    peak parameters.
    """
    rng = _rng_for(seed)
    field = evaluate_peak(grid, draw_peak_params(grid, rule, rng))
    x = forward_project(cmatrix, field)
    if noise.effective_level > 0.0:
        x_max = np.max(np.abs(x))
        x = x + noise.level * x_max * rng.standard_normal(x.shape[0])
    return PhantomSample(field=field.reshape(-1), measurements=x, seed=int(seed))


def generate_dataset(
    grid: Grid,
    cmatrix: ContributionMatrix,
    rule: PhantomRule,
    noise: NoiseSpec,
    count: int,
    base_seed: int,
    threads: int = 1,
) -> Dataset:
    """Generate ``count`` samples, sample j seeded with base_seed + j.

    Arrays are float64 in memory; persisting through the datastore narrows
    them to the float32 storage format.
    """
    if cmatrix.grid != grid:
        raise ShapeMismatch("cmatrix was built for a different grid")
    if count < 1:
        raise InvalidCount(f"count must be >= 1, got {count}")

    def one(j: int) -> PhantomSample:
        return generate_sample(grid, cmatrix, rule, noise, base_seed + j)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(one, range(count)))
    else:
        samples = [one(j) for j in range(count)]

    inputs = np.stack([s.measurements for s in samples])
    labels = np.stack([s.field.reshape(grid.shape) for s in samples])
    manifest = DatasetManifest(
        m=count,
        n=cmatrix.n,
        numz=grid.numz,
        numr=grid.numr,
        source="phantom",
        base_seed=int(base_seed),
        noise=noise.to_dict(),
        rule=rule.to_dict(),
        grid=grid.to_dict(),
    )
    return Dataset(inputs=inputs, labels=labels, manifest=manifest)
