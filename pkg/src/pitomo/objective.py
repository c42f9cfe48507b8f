"""Training losses and evaluation metrics.

The composite loss is L = loss1 + w2 * loss2 + lambda * ||w||^2 with
loss1 the image-space MSE, loss2 the measurement-space MSE after forward
projection of the prediction, and w2 = c1 * loss1 / loss2 recomputed from
the current detached values at every step.  That ratio keeps the second
term pinned at a fixed fraction c1 of the first: w2 * loss2 == c1 * loss1
identically, which is the logged, testable form of the dynamic weighting.

Metrics run in float64 numpy.  E1 compares predictions with labels in
image space; E2 compares forward-projected predictions with the measured
inputs.  Both normalize per sample by that sample's own maximum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DegenerateLossWarning, DegenerateSample, ShapeMismatch
from .geometry import ContributionMatrix

__all__ = [
    "LossConfig",
    "PilfResult",
    "loss1",
    "loss2",
    "pilf",
    "operator_tensor",
    "MetricsReport",
    "metric_E1",
    "metric_E2",
    "metrics_report",
]


@dataclass(frozen=True)
class LossConfig:
    """Composite-loss knobs: c1 scales loss2's share, lam the L2 term."""

    c1: float = 1.0
    lam: float = 1e-4
    detach_weight: bool = True

    def __post_init__(self) -> None:
        if not (np.isfinite(self.c1) and self.c1 >= 0):
            raise ConfigError(f"c1 must be a non-negative real, got {self.c1}")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError(f"lambda must be a non-negative real, got {self.lam}")


def _flatten_pair(a: torch.Tensor, b: torch.Tensor, what: str) -> tuple[torch.Tensor, torch.Tensor]:
    if a.dim() == 1:
        a = a[None]
    if b.dim() == 1:
        b = b[None]
    a, b = a.flatten(start_dim=1), b.flatten(start_dim=1)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def loss1(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Image-space MSE: mean over the numz*numr pixels, then over the batch."""
    p, y = _flatten_pair(pred, label, "loss1")
    return ((p - y) ** 2).mean(dim=1).mean()


def operator_tensor(cmatrix, dtype=torch.float32, device=None) -> torch.Tensor:
    """Contribution matrix as a torch (n, numz*numr) row operator."""
    if isinstance(cmatrix, ContributionMatrix):
        mat = torch.as_tensor(cmatrix.as_matrix())
    else:
        mat = torch.as_tensor(cmatrix)
        if mat.dim() == 3:
            mat = mat.flatten(start_dim=1)
    if mat.dim() != 2:
        raise ShapeMismatch(f"operator must be 2D or 3D, got shape {tuple(mat.shape)}")
    return mat.to(dtype=dtype, device=device)


def loss2(pred: torch.Tensor, x: torch.Tensor, cmatrix) -> torch.Tensor:
    """Measurement-space MSE: mean over the n chords, then over the batch.

    The prediction is forward-projected through the contribution matrix;
    gradients flow through that linear map back into the prediction.
    """
    cmat = operator_tensor(cmatrix, dtype=pred.dtype, device=pred.device)
    if pred.dim() == 1:
        pred = pred[None]
    if x.dim() == 1:
        x = x[None]
    p = pred.flatten(start_dim=1)
    if p.shape[1] != cmat.shape[1]:
        raise ShapeMismatch(f"prediction length {p.shape[1]} != operator cells {cmat.shape[1]}")
    if x.shape != (p.shape[0], cmat.shape[0]):
        raise ShapeMismatch(
            f"measurements shape {tuple(x.shape)} != ({p.shape[0]}, {cmat.shape[0]})"
        )
    bp = p @ cmat.T
    return ((bp - x) ** 2).mean(dim=1).mean()


@dataclass(frozen=True)
class PilfResult:
    """Composite loss with its components, weights as plain floats."""

    total: torch.Tensor
    loss1: torch.Tensor
    loss2: torch.Tensor | None
    w2: float
    reg: torch.Tensor

    def log_dict(self) -> dict:
        return {
            "loss": float(self.total.detach()),
            "loss1": float(self.loss1.detach()),
            "loss2": None if self.loss2 is None else float(self.loss2.detach()),
            "w2": self.w2,
            "reg": float(self.reg.detach()),
        }


def pilf(
    pred: torch.Tensor,
    label: torch.Tensor,
    x: torch.Tensor,
    cmatrix,
    params,
    cfg: LossConfig,
) -> PilfResult:
    """Composite loss L = loss1 + w2 * loss2 + lam * sum of squared params.

    With detach_weight (default) w2 is a plain float computed from the
    detached loss values, so no gradient flows through the ratio; the
    identity w2 * loss2 == c1 * loss1 then holds to float64 rounding.
    With c1 = 0 the second term is skipped entirely.
    """
    l1 = loss1(pred, label)
    reg = pred.new_zeros(())
    for p in params:
        reg = reg + (p.to(pred.dtype) ** 2).sum()
    reg = cfg.lam * reg
    if cfg.c1 == 0.0:
        return PilfResult(total=l1 + reg, loss1=l1, loss2=None, w2=0.0, reg=reg)
    l2 = loss2(pred, x, cmatrix)
    l2_value = float(l2.detach())
    if l2_value == 0.0:
        warnings.warn(
            "loss2 is exactly zero; w2 set to 0 for this step",
            DegenerateLossWarning,
            stacklevel=2,
        )
        return PilfResult(total=l1 + reg, loss1=l1, loss2=l2, w2=0.0, reg=reg)
    if cfg.detach_weight:
        w2 = cfg.c1 * float(l1.detach()) / l2_value
        total = l1 + w2 * l2 + reg
    else:
        w2_t = cfg.c1 * l1 / l2
        total = l1 + w2_t * l2 + reg
        w2 = float(w2_t.detach())
    return PilfResult(total=total, loss1=l1, loss2=l2, w2=w2, reg=reg)


def _as_sample_major(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim == 3:
        arr = arr.reshape(arr.shape[0], -1)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{what} must be 1D, 2D or 3D, got shape {arr.shape}")
    return arr


def metric_E1(preds: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean relative image error and the per-sample, per-pixel error maps.

    eps1[j, i] = |pred_i - y_i| / max(y^j); E1 averages over pixels then
    samples.
    """
    p = _as_sample_major(preds, "predictions")
    y = _as_sample_major(labels, "labels")
    if p.shape != y.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != label shape {y.shape}")
    y_max = y.max(axis=1)
    dead = np.flatnonzero(y_max <= 0.0)
    if dead.size:
        raise DegenerateSample(f"sample {int(dead[0])} has max(label) <= 0")
    eps1 = np.abs(p - y) / y_max[:, None]
    return float(eps1.mean(axis=1).mean()), eps1


def metric_E2(preds: np.ndarray, inputs: np.ndarray, cmatrix) -> tuple[float, np.ndarray]:
    """Mean relative back-projection error and per-sample, per-chord vectors.

    The model prediction is forward-projected and compared with the
    measured inputs: eps2[j, i] = |x_i - C_i . pred| / max|x^j|.
    """
    p = _as_sample_major(preds, "predictions")
    x = _as_sample_major(inputs, "inputs")
    cmat = (
        cmatrix.as_matrix()
        if isinstance(cmatrix, ContributionMatrix)
        else np.asarray(cmatrix, dtype=np.float64).reshape(np.shape(cmatrix)[0], -1)
    )
    if p.shape[1] != cmat.shape[1]:
        raise ShapeMismatch(f"prediction length {p.shape[1]} != operator cells {cmat.shape[1]}")
    if x.shape != (p.shape[0], cmat.shape[0]):
        raise ShapeMismatch(f"inputs shape {x.shape} != ({p.shape[0]}, {cmat.shape[0]})")
    x_max = np.max(np.abs(x), axis=1)
    dead = np.flatnonzero(x_max == 0.0)
    if dead.size:
        raise DegenerateSample(f"sample {int(dead[0])} has max |x| == 0")
    bp = p @ cmat.T
    eps2 = np.abs(x - bp) / x_max[:, None]
    return float(eps2.mean(axis=1).mean()), eps2


@dataclass(frozen=True)
class MetricsReport:
    """E1/E2 summary plus unreduced error dumps for requested samples."""

    E1: float
    E2: float
    m: int
    sample_indices: tuple[int, ...] = ()
    eps1_samples: np.ndarray | None = None
    eps2_samples: np.ndarray | None = None

    def to_dict(self, dataset: str = "", model: str = "") -> dict:
        d = {"dataset": dataset, "model": model, "E1": self.E1, "E2": self.E2, "m": self.m}
        if self.sample_indices:
            d["samples"] = {
                str(j): {
                    "eps1": self.eps1_samples[k].tolist(),
                    "eps2": self.eps2_samples[k].tolist(),
                }
                for k, j in enumerate(self.sample_indices)
            }
        return d


def metrics_report(
    preds: np.ndarray,
    labels: np.ndarray,
    inputs: np.ndarray,
    cmatrix,
    sample_indices: tuple[int, ...] = (),
) -> MetricsReport:
    """Compute both metrics, retaining full error dumps for chosen samples."""
    e1, eps1 = metric_E1(preds, labels)
    e2, eps2 = metric_E2(preds, inputs, cmatrix)
    keep = tuple(int(j) for j in sample_indices)
    return MetricsReport(
        E1=e1,
        E2=e2,
        m=eps1.shape[0],
        sample_indices=keep,
        eps1_samples=eps1[list(keep)] if keep else None,
        eps2_samples=eps2[list(keep)] if keep else None,
    )
