"""Desk-scale preset: a configuration small enough for laptop-class runs.

Grid 16x18, twenty chords in two fans, 2,000 phantom samples, 20 training
epochs at batch 16.  Trend experiments (activation choice, physical
information, composite loss) use this preset; absolute error levels at
this scale are not comparable to full-size instruments.

The phantom rule draws peaks wide relative to the grid, so every cell
carries a meaningful positive value, as on a real cross-section.  Fields
with large exact-zero regions hand the relu head an artificial advantage
(dead output pixels fit zeros for free) that inverts the activation and
fusion trends this preset exists to show.
"""

from __future__ import annotations

import numpy as np

from .geometry import Chord, ContributionMatrix, Grid, build_cmatrix, build_grid
from .phantom import NoiseSpec, PhantomRule
from .trainer import TrainConfig

__all__ = [
    "DESK_NUMZ",
    "DESK_NUMR",
    "DESK_CHORDS",
    "DESK_SAMPLES",
    "DESK_EPOCHS",
    "DESK_BATCH",
    "desk_grid",
    "desk_chords",
    "desk_cmatrix",
    "desk_rule",
    "desk_noise",
    "desk_train_config",
]

DESK_NUMZ = 16
DESK_NUMR = 18
DESK_CHORDS = 20
DESK_SAMPLES = 2000
DESK_EPOCHS = 20
DESK_BATCH = 16


def desk_grid() -> Grid:
    return build_grid(1.0, 2.0, -0.6, 0.6, numr=DESK_NUMR, numz=DESK_NUMZ)


def desk_chords() -> list[Chord]:
    """Two viewing fans: twelve horizontal lines, eight vertical."""
    chords = []
    for z_end in np.linspace(-0.72, 0.72, 12):
        chords.append(Chord(start=(0.85, 0.0), end=(2.15, float(z_end)), beam_width=0.0))
    for r_end in np.linspace(1.08, 1.92, 8):
        chords.append(Chord(start=(1.5, 0.75), end=(float(r_end), -0.75), beam_width=0.0))
    return chords


def desk_cmatrix(subrays: int = 5, threads: int = 1) -> ContributionMatrix:
    return build_cmatrix(desk_grid(), desk_chords(), subrays=subrays, threads=threads)


def desk_rule() -> PhantomRule:
    return PhantomRule(
        sigma_range=(0.5, 0.7),
        ellipticity_range=(1.0, 1.5),
        margin=0.2,
    )


def desk_noise(level: float = 0.0) -> NoiseSpec:
    if level == 0.0:
        return NoiseSpec(kind="none", level=0.0)
    return NoiseSpec(kind="gaussian_relative", level=level)


def desk_train_config(
    seed: int,
    loss_mode: str = "loss1_only",
    c1: float = 1.0,
    epochs: int = DESK_EPOCHS,
    batch_size: int = DESK_BATCH,
) -> TrainConfig:
    # lr0 is aggressive for the small budget; 20 epochs on 1,600 samples
    # must reach near-converged behavior for the trends to be readable
    return TrainConfig(
        lr0=3e-3,
        lr_min=1e-5,
        period=epochs,
        max_epochs=epochs,
        batch_size=batch_size,
        patience=epochs,
        c1=c1,
        seed=seed,
        loss_mode=loss_mode,
    )
