"""Dataset persistence, splitting, and label-quality assessment.

On-disk layout (one directory per object, no compression):

    manifest.json   UTF-8, schema-versioned metadata
    inputs.f32      raw little-endian IEEE-754 float32, sample-major (m, n)
    labels.f32      float32, (m, numz, numr) row-major
    cmatrix.f32     float32, (n, numz, numr) row-major   [cmatrix stores]

Blobs are bit-exact round-trippable from any language.  Quality assessment
upcasts to float64 regardless of storage precision.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateSample,
    FormatError,
    InvalidRatios,
    ShapeMismatch,
    StoreIOError,
)
from .geometry import ContributionMatrix, Grid

__all__ = [
    "DatasetManifest",
    "Dataset",
    "QualityReport",
    "epsilon_j",
    "assess_quality",
    "split",
    "write_dataset",
    "read_dataset",
    "write_cmatrix",
    "read_cmatrix",
]

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
INPUTS_BLOB = "inputs.f32"
LABELS_BLOB = "labels.f32"
CMATRIX_BLOB = "cmatrix.f32"
LOCK_NAME = ".lock"


@dataclass
class DatasetManifest:
    """Metadata record stored alongside the binary blobs."""

    m: int
    n: int
    numz: int
    numr: int
    source: str = "unknown"
    format_version: int = FORMAT_VERSION
    kind: str = "dataset"
    base_seed: int | None = None
    noise: dict | None = None
    rule: dict | None = None
    grid: dict | None = None
    parent_hash: str | None = None
    split: dict | None = None
    meta: dict = field(default_factory=dict)

    def core_dict(self) -> dict:
        """All fields except ``meta`` (the only place timestamps may live)."""
        d = self.to_dict()
        d.pop("meta", None)
        return d

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "kind": self.kind,
            "m": self.m,
            "n": self.n,
            "numz": self.numz,
            "numr": self.numr,
            "source": self.source,
            "base_seed": self.base_seed,
            "noise": self.noise,
            "rule": self.rule,
            "grid": self.grid,
            "parent_hash": self.parent_hash,
            "split": self.split,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            return cls(
                m=int(d["m"]),
                n=int(d["n"]),
                numz=int(d["numz"]),
                numr=int(d["numr"]),
                source=str(d.get("source", "unknown")),
                format_version=int(d["format_version"]),
                kind=str(d.get("kind", "dataset")),
                base_seed=d.get("base_seed"),
                noise=d.get("noise"),
                rule=d.get("rule"),
                grid=d.get("grid"),
                parent_hash=d.get("parent_hash"),
                split=d.get("split"),
                meta=dict(d.get("meta", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid dataset manifest: {exc!r}") from exc


@dataclass
class Dataset:
    """Paired measurements and emissivity fields with manifest metadata.

    ``inputs`` has shape (m, n); ``labels`` has shape (m, numz, numr).
    Freshly generated datasets carry float64 arrays; the persisted format
    is float32, so a round trip through disk narrows precision once.
    """

    inputs: np.ndarray
    labels: np.ndarray
    manifest: DatasetManifest

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2:
            raise ShapeMismatch(f"inputs must be 2D (m, n), got {self.inputs.shape}")
        if self.labels.ndim != 3:
            raise ShapeMismatch(f"labels must be 3D (m, numz, numr), got {self.labels.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeMismatch(
                f"inputs rows ({self.inputs.shape[0]}) != labels count ({self.labels.shape[0]})"
            )
        if self.inputs.shape[0] < 1:
            raise ShapeMismatch("dataset must contain at least one sample")
        man = self.manifest
        if (man.m, man.n) != self.inputs.shape or (man.m, man.numz, man.numr) != self.labels.shape:
            raise ShapeMismatch(
                f"manifest dims (m={man.m}, n={man.n}, numz={man.numz}, numr={man.numr}) "
                f"inconsistent with arrays {self.inputs.shape} / {self.labels.shape}"
            )

    @property
    def m(self) -> int:
        return self.inputs.shape[0]

    def labels_flat(self) -> np.ndarray:
        return self.labels.reshape(self.m, -1)

    def subset(self, indices: np.ndarray, split_info: dict | None = None) -> "Dataset":
        manifest = replace(
            self.manifest,
            m=len(indices),
            parent_hash=content_hash(self),
            split=split_info,
            meta=dict(self.manifest.meta),
        )
        return Dataset(
            inputs=self.inputs[indices].copy(),
            labels=self.labels[indices].copy(),
            manifest=manifest,
        )


def content_hash(dataset: Dataset) -> str:
    """SHA-256 over the storage-precision blobs plus the core manifest.

    Arrays are hashed at float32 storage precision, so the hash of a fresh
    in-memory dataset equals the hash of its disk round trip.  The ``meta``
    field (timestamps) never enters the hash.
    """
    h = hashlib.sha256()
    core = dict(dataset.manifest.core_dict())
    core.pop("parent_hash", None)  # lineage must not alter content identity
    core.pop("split", None)
    h.update(json.dumps(core, sort_keys=True).encode("utf-8"))
    h.update(np.ascontiguousarray(dataset.inputs, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(dataset.labels, dtype="<f4").tobytes())
    return h.hexdigest()


def epsilon_j(x: np.ndarray, y: np.ndarray, cmatrix: ContributionMatrix) -> float:
    """Mean relative back-projection error of one sample.

    eps_j = (1/n) * sum_i |x_i - C_i . y| / max_i |x_i|.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    cmat = cmatrix.as_matrix()
    if x.shape != (cmat.shape[0],):
        raise ShapeMismatch(f"x length {x.shape} != chord count {cmat.shape[0]}")
    if y.shape[0] != cmat.shape[1]:
        raise ShapeMismatch(f"field length {y.shape[0]} != numz*numr = {cmat.shape[1]}")
    x_max = float(np.max(np.abs(x)))
    if x_max == 0.0:
        raise DegenerateSample("max |x| is zero; eps_j undefined")
    return float(np.mean(np.abs(x - cmat @ y)) / x_max)


@dataclass(frozen=True)
class QualityReport:
    """Per-sample eps_j values and their dataset mean."""

    per_sample_eps: np.ndarray
    eps_bar: float
    worst_index: int

    def to_dict(self, per_sample: bool = False) -> dict:
        d = {
            "eps_bar": self.eps_bar,
            "worst_index": self.worst_index,
            "worst_eps": float(self.per_sample_eps[self.worst_index]),
            "m": int(self.per_sample_eps.shape[0]),
        }
        if per_sample:
            d["per_sample_eps"] = [float(v) for v in self.per_sample_eps]
        return d


def assess_quality(dataset: Dataset, cmatrix: ContributionMatrix) -> QualityReport:
    """Apply eps_j to every sample; eps_bar is the arithmetic mean.

    Always computed in float64.  Raises DegenerateSample naming the first
    sample whose measurement vector is identically zero.
    """
    cmat = cmatrix.as_matrix()
    if dataset.inputs.shape[1] != cmat.shape[0]:
        raise ShapeMismatch(
            f"dataset n ({dataset.inputs.shape[1]}) != cmatrix rows ({cmat.shape[0]})"
        )
    if dataset.labels.shape[1:] != (cmatrix.numz, cmatrix.numr):
        raise ShapeMismatch(
            f"dataset label planes {dataset.labels.shape[1:]} != cmatrix grid "
            f"({cmatrix.numz}, {cmatrix.numr})"
        )
    x = dataset.inputs.astype(np.float64, copy=False)
    bp = dataset.labels_flat().astype(np.float64, copy=False) @ cmat.T
    x_max = np.max(np.abs(x), axis=1)
    dead = np.flatnonzero(x_max == 0.0)
    if dead.size:
        raise DegenerateSample(f"sample {int(dead[0])} has max |x| == 0")
    eps = np.mean(np.abs(x - bp), axis=1) / x_max
    return QualityReport(
        per_sample_eps=eps,
        eps_bar=float(np.mean(eps)),
        worst_index=int(np.argmax(eps)),
    )


def split(
    dataset: Dataset, ratios: tuple[float, float, float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic shuffled partition into train/valid/test datasets.

    Part sizes are the rounded ratio shares, with the test part absorbing
    the remainder; the three index sets are disjoint and exhaustive.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise InvalidRatios(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios must sum to 1, got sum {sum(ratios)!r}")
    m = dataset.m
    n_train = int(np.floor(m * ratios[0] + 0.5))
    n_valid = int(np.floor(m * ratios[1] + 0.5))
    n_test = m - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        # every part must be a valid dataset (m >= 1)
        raise InvalidRatios(f"ratios {ratios} leave an empty part for m={m}")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(m)
    parts = (
        perm[:n_train],
        perm[n_train : n_train + n_valid],
        perm[n_train + n_valid :],
    )
    names = ("train", "valid", "test")
    return tuple(
        dataset.subset(
            idx, split_info={"part": name, "ratios": list(ratios), "seed": int(seed)}
        )
        for name, idx in zip(names, parts)
    )


class _DirLock:
    """Exclusive lock file guarding writes to a store directory."""

    def __init__(self, directory: str):
        self.path = os.path.join(directory, LOCK_NAME)
        self._fd = None

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StoreIOError(f"store {os.path.dirname(self.path)} is locked for writing")
        except OSError as exc:
            raise StoreIOError(f"cannot create lock file {self.path}: {exc}") from exc
        return self

    def __exit__(self, *exc_info):
        if self._fd is not None:
            os.close(self._fd)
            os.unlink(self.path)
        return False


def _write_blob(path: str, array: np.ndarray) -> None:
    try:
        np.ascontiguousarray(array, dtype="<f4").tofile(path)
    except OSError as exc:
        raise StoreIOError(f"cannot write blob {path}: {exc}") from exc


def _read_blob(path: str, expected_count: int, shape: tuple[int, ...]) -> np.ndarray:
    try:
        raw = np.fromfile(path, dtype="<f4")
    except OSError as exc:
        raise StoreIOError(f"cannot read blob {path}: {exc}") from exc
    if raw.size != expected_count:
        raise FormatError(
            f"blob {path} holds {raw.size} float32 values, manifest implies {expected_count}"
        )
    return raw.reshape(shape)


def _read_manifest_dict(directory: str) -> dict:
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
    except OSError as exc:
        raise StoreIOError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"manifest {path}: unsupported format_version {version!r}")
    return d


def write_dataset(dataset: Dataset, directory: str) -> None:
    """Persist a dataset; the write holds an exclusive directory lock.

    The manifest is written last so a truncated write is detectable.
    """
    os.makedirs(directory, exist_ok=True)
    with _DirLock(directory):
        _write_blob(os.path.join(directory, INPUTS_BLOB), dataset.inputs)
        _write_blob(os.path.join(directory, LABELS_BLOB), dataset.labels)
        try:
            with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
                json.dump(dataset.manifest.to_dict(), fh, indent=2)
                fh.write("\n")
        except OSError as exc:
            raise StoreIOError(f"cannot write manifest in {directory}: {exc}") from exc


def read_dataset(directory: str) -> Dataset:
    """Load a dataset directory; arrays come back float32, bit-exact."""
    man_dict = _read_manifest_dict(directory)
    if man_dict.get("kind") != "dataset":
        raise FormatError(f"{directory} holds kind {man_dict.get('kind')!r}, not a dataset")
    manifest = DatasetManifest.from_dict(man_dict)
    inputs = _read_blob(
        os.path.join(directory, INPUTS_BLOB), manifest.m * manifest.n, (manifest.m, manifest.n)
    )
    labels = _read_blob(
        os.path.join(directory, LABELS_BLOB),
        manifest.m * manifest.numz * manifest.numr,
        (manifest.m, manifest.numz, manifest.numr),
    )
    return Dataset(inputs=inputs, labels=labels, manifest=manifest)


def write_cmatrix(cmatrix: ContributionMatrix, directory: str, source: str = "unknown") -> None:
    """Persist a contribution matrix in the shared binary format."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "cmatrix",
        "n": cmatrix.n,
        "numz": cmatrix.numz,
        "numr": cmatrix.numr,
        "grid": cmatrix.grid.to_dict(),
        "source": source,
        "meta": {},
    }
    with _DirLock(directory):
        _write_blob(os.path.join(directory, CMATRIX_BLOB), cmatrix.weights)
        try:
            with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
                json.dump(manifest, fh, indent=2)
                fh.write("\n")
        except OSError as exc:
            raise StoreIOError(f"cannot write manifest in {directory}: {exc}") from exc


def read_cmatrix(directory: str) -> ContributionMatrix:
    """Load a contribution matrix, upcasting weights to float64."""
    man = _read_manifest_dict(directory)
    if man.get("kind") != "cmatrix":
        raise FormatError(f"{directory} holds kind {man.get('kind')!r}, not a cmatrix")
    try:
        n, numz, numr = int(man["n"]), int(man["numz"]), int(man["numr"])
        grid = Grid.from_dict(man["grid"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid cmatrix manifest in {directory}: {exc!r}") from exc
    if (numz, numr) != grid.shape:
        raise FormatError(
            f"cmatrix manifest dims ({numz}, {numr}) disagree with its grid {grid.shape}"
        )
    weights = _read_blob(
        os.path.join(directory, CMATRIX_BLOB), n * numz * numr, (n, numz, numr)
    ).astype(np.float64)
    return ContributionMatrix(weights=weights, grid=grid)
