"""Training loop: Adam, cosine-annealed learning rate, early stopping.

Determinism contract: given the same initialized model, datasets, and
config (seed included), two runs produce bit-identical histories and
weights.  All randomness flows through one torch.Generator seeded from
the config; batch order is the only stochastic element in the loop.

A run directory, when given, receives best.ckpt and last.ckpt in the
portable checkpoint format, history.jsonl (one record per epoch), and
resume.pt with full optimizer and generator state for exact continuation.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .datastore import Dataset
from .errors import ConfigError, NonFiniteLoss, ShapeMismatch
from .geometry import ContributionMatrix
from .network import SurrogateNet, save_checkpoint
from .objective import LossConfig, metrics_report, operator_tensor, pilf

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "EarlyStopper",
    "cosine_lr",
    "train",
    "predict_fields",
    "EvalReport",
    "evaluate",
]

LOSS_MODES = ("loss1_only", "pilf")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization protocol knobs with production defaults."""

    lr0: float = 1e-4
    lr_min: float = 1e-5
    period: int = 50
    max_epochs: int = 50
    batch_size: int = 256
    patience: int = 25
    lam: float = 1e-4
    c1: float = 1.0
    seed: int = 0
    loss_mode: str = "loss1_only"

    def __post_init__(self) -> None:
        if not (0 < self.lr_min < self.lr0):
            raise ConfigError(f"need 0 < lr_min < lr0, got {self.lr_min} / {self.lr0}")
        if self.period < 1 or self.max_epochs < 1:
            raise ConfigError("period and max_epochs must be >= 1")
        if not (1 <= self.patience <= self.max_epochs):
            raise ConfigError(f"patience must be in [1, max_epochs], got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.lam < 0 or self.c1 < 0:
            raise ConfigError("lambda and c1 must be non-negative")

    def to_dict(self) -> dict:
        return {
            "lr0": self.lr0, "lr_min": self.lr_min, "period": self.period,
            "max_epochs": self.max_epochs, "batch_size": self.batch_size,
            "patience": self.patience, "lam": self.lam, "c1": self.c1,
            "seed": self.seed, "loss_mode": self.loss_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        extra = set(d) - set(known)
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        return cls(**known)

    def loss_config(self) -> LossConfig:
        c1 = self.c1 if self.loss_mode == "pilf" else 0.0
        return LossConfig(c1=c1, lam=self.lam)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Single cosine decay from lr0 to lr_min, flat after ``period``."""
    t = min(epoch, cfg.period) / cfg.period
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + math.cos(math.pi * t))


class EarlyStopper:
    """Strict-decrease improvement tracking with a stale-epoch budget."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record one epoch's validation loss; True if it improved."""
        if value < self.best:
            self.best = value
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class TrainHistory:
    """Per-epoch records, per-step loss logs, and the run outcome."""

    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    best_epoch: int = -1
    best_valid: float = math.inf
    stop_reason: str = ""

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.epochs:
                fh.write(json.dumps(record) + "\n")


def _check_dataset(dataset: Dataset, spec, what: str) -> None:
    if dataset.inputs.shape[1] != spec.n:
        raise ShapeMismatch(
            f"{what} set has {dataset.inputs.shape[1]} measurements, model expects {spec.n}"
        )
    if dataset.labels.shape[1:] != (spec.numz, spec.numr):
        raise ShapeMismatch(
            f"{what} set labels {dataset.labels.shape[1:]} != model grid "
            f"({spec.numz}, {spec.numr})"
        )


def _valid_loss(
    model: SurrogateNet,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    pi_tensor: torch.Tensor | None,
    cmat: torch.Tensor,
    cfg: TrainConfig,
    batch_size: int,
) -> float:
    """Full-set composite loss, accumulated in float64 for determinism."""
    model.eval()
    lcfg = cfg.loss_config()
    m = inputs.shape[0]
    sq1 = torch.zeros((), dtype=torch.float64)
    sq2 = torch.zeros((), dtype=torch.float64)
    with torch.no_grad():
        for start in range(0, m, batch_size):
            xb = inputs[start : start + batch_size]
            yb = labels[start : start + batch_size]
            pred = model(xb, pi_tensor)
            sq1 += ((pred - yb) ** 2).sum(dtype=torch.float64)
            if lcfg.c1 > 0:
                bp = pred @ cmat.T
                sq2 += ((bp - xb) ** 2).sum(dtype=torch.float64)
        reg = sum((p.double() ** 2).sum() for p in model.parameters())
    l1 = float(sq1) / (m * labels.shape[1])
    total = l1 + cfg.lam * float(reg)
    if lcfg.c1 > 0:
        l2 = float(sq2) / (m * inputs.shape[1])
        if l2 > 0:
            total += (lcfg.c1 * l1 / l2) * l2  # == c1 * l1; kept explicit
    return total


def train(
    model: SurrogateNet,
    train_set: Dataset,
    valid_set: Dataset,
    cmatrix: ContributionMatrix,
    cfg: TrainConfig,
    run_dir: str | None = None,
    resume: bool = False,
) -> tuple[SurrogateNet, TrainHistory]:
    """Optimize the model; return it restored to its best-valid weights.

    Batches of size 1 are dropped (batch statistics need two samples).
    The per-step log records loss components and w2 for every update, so
    the weighting identity can be audited after the fact.
    """
    spec = model.spec
    _check_dataset(train_set, spec, "train")
    _check_dataset(valid_set, spec, "valid")
    if cmatrix.n != spec.n or cmatrix.grid.shape != (spec.numz, spec.numr):
        raise ShapeMismatch("contribution matrix does not match the model spec")

    x_train = torch.as_tensor(train_set.inputs, dtype=torch.float32)
    y_train = torch.as_tensor(train_set.labels_flat(), dtype=torch.float32)
    x_valid = torch.as_tensor(valid_set.inputs, dtype=torch.float32)
    y_valid = torch.as_tensor(valid_set.labels_flat(), dtype=torch.float32)
    pi_tensor = (
        torch.as_tensor(cmatrix.weights, dtype=torch.float32) if spec.use_pi else None
    )
    cmat = operator_tensor(cmatrix, dtype=torch.float32)
    cmat_np = cmatrix.as_matrix()
    lcfg = cfg.loss_config()

    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    history = TrainHistory()
    stopper = EarlyStopper(cfg.patience)
    best_state = None
    start_epoch = 0

    resume_path = os.path.join(run_dir, "resume.pt") if run_dir else None
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
    if resume and resume_path and os.path.exists(resume_path):
        snap = torch.load(resume_path, weights_only=False)
        model.load_state_dict(snap["model"])
        optimizer.load_state_dict(snap["optimizer"])
        gen.set_state(snap["generator"])
        history.epochs = snap["epochs"]
        history.steps = snap["steps"]
        history.best_epoch = snap["best_epoch"]
        history.best_valid = snap["best_valid"]
        best_state = snap["best_state"]
        stopper.best = snap["best_valid"]
        stopper.stale = snap["stale"]
        start_epoch = snap["epoch"] + 1

    m = x_train.shape[0]
    for epoch in range(start_epoch, cfg.max_epochs):
        lr = cosine_lr(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        perm = torch.randperm(m, generator=gen)
        step_losses = []
        step_w2 = []
        for step, start in enumerate(range(0, m, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            if idx.shape[0] < 2:
                continue
            pred = model(x_train[idx], pi_tensor)
            result = pilf(pred, y_train[idx], x_train[idx], cmat, model.parameters(), lcfg)
            if not torch.isfinite(result.total):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch {step} "
                    f"(loss1={float(result.loss1.detach()):g})"
                )
            optimizer.zero_grad()
            result.total.backward()
            optimizer.step()
            record = result.log_dict()
            record.update({"epoch": epoch, "step": step})
            history.steps.append(record)
            step_losses.append(record["loss"])
            step_w2.append(record["w2"])

        valid_loss = _valid_loss(model, x_valid, y_valid, pi_tensor, cmat, cfg, cfg.batch_size)
        preds_valid = predict_fields(model, x_valid, pi_tensor, batch_size=cfg.batch_size)
        report = metrics_report(preds_valid, valid_set.labels_flat(), valid_set.inputs, cmat_np)
        history.epochs.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(step_losses)) if step_losses else math.nan,
                "valid_loss": valid_loss,
                "w2": float(np.mean(step_w2)) if step_w2 else 0.0,
                "E1_valid": report.E1,
                "E2_valid": report.E2,
            }
        )

        improved = stopper.update(valid_loss)
        if improved:
            history.best_epoch = epoch
            history.best_valid = valid_loss
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if run_dir:
                save_checkpoint(model, os.path.join(run_dir, "best.ckpt"))
        if run_dir:
            save_checkpoint(model, os.path.join(run_dir, "last.ckpt"))
            history.write_jsonl(os.path.join(run_dir, "history.jsonl"))
            torch.save(
                {
                    "epoch": epoch,
                    "model": model.state_dict(),
                    "optimizer": optimizer.state_dict(),
                    "generator": gen.get_state(),
                    "epochs": history.epochs,
                    "steps": history.steps,
                    "best_epoch": history.best_epoch,
                    "best_valid": history.best_valid,
                    "best_state": best_state,
                    "stale": stopper.stale,
                },
                resume_path,
            )
        if stopper.should_stop:
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs"

    if best_state is not None:
        model.load_state_dict(best_state)
        if run_dir:
            save_checkpoint(model, os.path.join(run_dir, "best.ckpt"))
    return model, history


def predict_fields(
    model: SurrogateNet,
    inputs,
    pi_tensor: torch.Tensor | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Batched inference returning float64 (m, numz*numr) predictions."""
    model.eval()
    x = torch.as_tensor(np.asarray(inputs), dtype=torch.float32)
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            outs.append(model(x[start : start + batch_size], pi_tensor).numpy())
    return np.concatenate(outs).astype(np.float64)


@dataclass(frozen=True)
class EvalReport:
    """Evaluation row: dataset tag, model name, and both metrics."""

    dataset: str
    model: str
    E1: float
    E2: float
    m: int
    sample_indices: tuple[int, ...] = ()
    eps1_samples: np.ndarray | None = None
    eps2_samples: np.ndarray | None = None

    def row(self) -> dict:
        return {"dataset": self.dataset, "model": self.model, "E1": self.E1, "E2": self.E2}

    def to_dict(self) -> dict:
        d = dict(self.row())
        d["m"] = self.m
        if self.sample_indices:
            d["samples"] = {
                str(j): {
                    "eps1": self.eps1_samples[k].tolist(),
                    "eps2": self.eps2_samples[k].tolist(),
                }
                for k, j in enumerate(self.sample_indices)
            }
        return d


def evaluate(
    model: SurrogateNet,
    test_set: Dataset,
    cmatrix: ContributionMatrix,
    sample_indices: tuple[int, ...] = (),
    dataset_name: str | None = None,
) -> EvalReport:
    """Compute E1/E2 over a dataset with optional per-sample error dumps."""
    spec = model.spec
    _check_dataset(test_set, spec, "test")
    if cmatrix.n != spec.n or cmatrix.grid.shape != (spec.numz, spec.numr):
        raise ShapeMismatch("contribution matrix does not match the model spec")
    pi_tensor = (
        torch.as_tensor(cmatrix.weights, dtype=torch.float32) if spec.use_pi else None
    )
    preds = predict_fields(model, test_set.inputs, pi_tensor)
    report = metrics_report(
        preds, test_set.labels_flat(), test_set.inputs, cmatrix, sample_indices
    )
    return EvalReport(
        dataset=dataset_name if dataset_name is not None else test_set.manifest.source,
        model=spec.variant_name,
        E1=report.E1,
        E2=report.E2,
        m=report.m,
        sample_indices=report.sample_indices,
        eps1_samples=report.eps1_samples,
        eps2_samples=report.eps2_samples,
    )
