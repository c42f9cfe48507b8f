"""Surrogate model variants: VggOnion, ResOnion, and their PI twins.

A model maps a measurement vector of length n to a flat emission field of
length numz*numr.  The measurement vector is broadcast onto n constant
(numz, numr) planes and fed to a convolutional backbone.  PI variants run
the static contribution-matrix tensor through a feature-extraction side
chain and fuse it into the backbone by element-wise multiplication before
the head.

Layer inventory conventions, fixed by the parameter-count contract:

* every convolution is 3x3 padding 1 (projections 1x1), keeps its bias,
  and is followed by BatchNorm2d + ReLU;
* residual blocks are post-activation: conv-bn-relu-conv-bn, add the
  shortcut, then relu; downscaling blocks use a stride-2 first conv and a
  1x1 stride-2 conv + bn projection shortcut;
* the head is Linear(flat -> zr) + BatchNorm1d + activation +
  Linear(zr -> zr) + activation;
* VggOnion and all PI paths end their feature stacks with an adaptive
  3x3 max-pool; plain ResOnion flattens its final feature map directly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import (
    FormatError,
    InvalidSpec,
    MissingPI,
    ShapeMismatch,
    SpatialUnderflow,
    SpecMismatch,
    StoreIOError,
)

__all__ = [
    "ModelSpec",
    "SurrogateNet",
    "InputRepr",
    "SideChain",
    "ResidualBlock",
    "broadcast_measurements",
    "fuse",
    "build_model",
    "init_weights",
    "count_parameters",
    "param_table",
    "describe_params",
    "FusionProbe",
    "fusion_gradient_probe",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"TOMOSRG1"

BACKBONES = ("vgg", "res")
ACTIVATIONS = ("relu", "softplus")


@dataclass(frozen=True)
class ModelSpec:
    """Complete architectural description; determines the parameter count."""

    backbone: str
    use_pi: bool
    final_activation: str
    n: int
    numz: int
    numr: int

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise InvalidSpec(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.final_activation not in ACTIVATIONS:
            raise InvalidSpec(
                f"final_activation must be one of {ACTIVATIONS}, got {self.final_activation!r}"
            )
        for name in ("n", "numz", "numr"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidSpec(f"{name} must be a positive integer, got {v}")

    @property
    def variant_name(self) -> str:
        base = {"vgg": "VggOnion", "res": "ResOnion"}[self.backbone]
        return base + ("_PI" if self.use_pi else "")

    @property
    def out_size(self) -> int:
        return self.numz * self.numr

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "use_pi": self.use_pi,
            "final_activation": self.final_activation,
            "n": self.n,
            "numz": self.numz,
            "numr": self.numr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(
                backbone=str(d["backbone"]),
                use_pi=bool(d["use_pi"]),
                final_activation=str(d["final_activation"]),
                n=int(d["n"]),
                numz=int(d["numz"]),
                numr=int(d["numr"]),
            )
        except KeyError as exc:
            raise InvalidSpec(f"model spec missing key {exc}") from exc

    def spec_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def param_count(self) -> int:
        """Closed-form total parameter count for this spec."""

        def conv(cin, cout):  # 3x3 conv + bias + bn(gamma, beta)
            return 9 * cin * cout + 3 * cout

        def block(cin, cout, scale):
            total = conv(cin, cout) + conv(cout, cout)
            if scale:
                total += cin * cout + 3 * cout  # 1x1 projection + bias + bn
            return total

        n, zr = self.n, self.out_size
        if self.backbone == "vgg":
            pairs = [(n, 2 * n), (2 * n, 2 * n), (2 * n, 4 * n), (4 * n, 4 * n),
                     (4 * n, 4 * n), (4 * n, 8 * n), (8 * n, 8 * n), (8 * n, 8 * n)]
            backbone = sum(conv(a, b) for a, b in pairs)
        else:
            blocks = [(n, n, False), (n, n, False), (n, 2 * n, True), (2 * n, 2 * n, False),
                      (2 * n, 4 * n, True), (4 * n, 4 * n, False), (4 * n, 8 * n, True),
                      (8 * n, 8 * n, False)]
            backbone = sum(block(a, b, s) for a, b, s in blocks)
        side = 0
        if self.use_pi:
            side_pairs = [(n, 2 * n), (2 * n, 2 * n), (2 * n, 4 * n), (4 * n, 4 * n),
                          (4 * n, 8 * n), (8 * n, 8 * n)]
            side = sum(conv(a, b) for a, b in side_pairs)
        flat = self.flat_features()
        head = flat * zr + zr + 2 * zr + zr * zr + zr
        return backbone + side + head

    def flat_features(self) -> int:
        """Feature count entering the head's first fully connected layer."""
        if self.backbone == "res" and not self.use_pi:
            h, w = self.numz, self.numr
            for _ in range(3):  # three stride-2 convolutions
                h, w = (h + 1) // 2, (w + 1) // 2
            return 8 * self.n * h * w
        return 8 * self.n * 9  # adaptive 3x3 pool everywhere else


def broadcast_measurements(x: torch.Tensor, numz: int, numr: int) -> torch.Tensor:
    """Spread each scalar x_i onto a constant (numz, numr) plane.

    (n,) -> (n, numz, numr); (B, n) -> (B, n, numz, numr).
    """
    if x.dim() == 1:
        return x[:, None, None].expand(x.shape[0], numz, numr)
    if x.dim() == 2:
        return x[:, :, None, None].expand(x.shape[0], x.shape[1], numz, numr)
    raise ShapeMismatch(f"measurement tensor must be 1D or 2D, got shape {tuple(x.shape)}")


class InputRepr(nn.Module):
    """Broadcast plus a learnable 3x3 n->n convolution.

    Standalone input representation with a trainable mixing stage.  The
    shipped model variants use the bare broadcast (their parameter budget
    carries no input convolution); this module is the extension point for
    experimenting with learned input mixing.
    """

    def __init__(self, n: int, numz: int, numr: int):
        super().__init__()
        self.n, self.numz, self.numr = n, numz, numr
        self.conv = nn.Conv2d(n, n, 3, padding=1)

    def identity_init(self) -> None:
        """Make the convolution a per-channel identity."""
        with torch.no_grad():
            self.conv.weight.zero_()
            for i in range(self.n):
                self.conv.weight[i, i, 1, 1] = 1.0
            self.conv.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.n:
            raise ShapeMismatch(f"expected {self.n} measurements, got {x.shape[-1]}")
        planes = broadcast_measurements(x, self.numz, self.numr)
        if planes.dim() == 3:
            return self.conv(planes[None])[0]
        return self.conv(planes)


def _conv_unit(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU())


class ResidualBlock(nn.Module):
    """Post-activation residual block, optional stride-2 downscaling."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride), nn.BatchNorm2d(cout)
            )
        else:
            self.shortcut = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.relu(out + skip)


class VggBackbone(nn.Module):
    """Conv stack 2n-2n / pool / 4n-4n-4n / pool / 8n-8n-8n / adaptive 3x3."""

    def __init__(self, n: int):
        super().__init__()
        self.stack = nn.Sequential(
            _conv_unit(n, 2 * n),
            _conv_unit(2 * n, 2 * n),
            nn.MaxPool2d(2),
            _conv_unit(2 * n, 4 * n),
            _conv_unit(4 * n, 4 * n),
            _conv_unit(4 * n, 4 * n),
            nn.MaxPool2d(2),
            _conv_unit(4 * n, 8 * n),
            _conv_unit(8 * n, 8 * n),
            _conv_unit(8 * n, 8 * n),
            nn.AdaptiveMaxPool2d((3, 3)),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stack(x)


class ResBackbone(nn.Module):
    """Eight residual blocks, channel doubling at each of three downscales.

    ``with_pool`` appends the adaptive 3x3 max-pool (needed whenever the
    output is fused with side-chain features); without it the final
    feature map keeps its strided spatial dims.
    """

    def __init__(self, n: int, with_pool: bool):
        super().__init__()
        self.blocks = nn.Sequential(
            ResidualBlock(n, n),
            ResidualBlock(n, n),
            ResidualBlock(n, 2 * n, stride=2),
            ResidualBlock(2 * n, 2 * n),
            ResidualBlock(2 * n, 4 * n, stride=2),
            ResidualBlock(4 * n, 4 * n),
            ResidualBlock(4 * n, 8 * n, stride=2),
            ResidualBlock(8 * n, 8 * n),
        )
        self.pool = nn.AdaptiveMaxPool2d((3, 3)) if with_pool else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.blocks(x)
        return out if self.pool is None else self.pool(out)


class SideChain(nn.Module):
    """Feature extraction for the contribution-matrix tensor.

    Two convs at 2n, max-pool, two at 4n, max-pool, two at 8n, adaptive
    3x3 max-pool; output (8n, 3, 3).
    """

    def __init__(self, n: int):
        super().__init__()
        self.stack = nn.Sequential(
            _conv_unit(n, 2 * n),
            _conv_unit(2 * n, 2 * n),
            nn.MaxPool2d(2),
            _conv_unit(2 * n, 4 * n),
            _conv_unit(4 * n, 4 * n),
            nn.MaxPool2d(2),
            _conv_unit(4 * n, 8 * n),
            _conv_unit(8 * n, 8 * n),
            nn.AdaptiveMaxPool2d((3, 3)),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stack(x)


def fuse(backbone_features: torch.Tensor, pi_features: torch.Tensor) -> torch.Tensor:
    """Element-wise product of backbone and PI feature blocks.

    The gradient with respect to either factor is the other factor, so the
    static PI tensor enters the backbone weights' gradients directly.
    """
    if backbone_features.shape[-3:] != pi_features.shape[-3:]:
        raise ShapeMismatch(
            f"cannot fuse {tuple(backbone_features.shape)} with {tuple(pi_features.shape)}"
        )
    return backbone_features * pi_features


class SurrogateNet(nn.Module):
    """One model variant assembled from a ModelSpec."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        needs_pool_room = spec.backbone == "vgg" or spec.use_pi
        if needs_pool_room and (spec.numz < 4 or spec.numr < 4):
            raise SpatialUnderflow(
                f"grid {spec.numz}x{spec.numr} too small for two 2x2 max-pools"
            )
        self.spec = spec
        if spec.backbone == "vgg":
            self.backbone = VggBackbone(spec.n)
        else:
            self.backbone = ResBackbone(spec.n, with_pool=spec.use_pi)
        self.side_chain = SideChain(spec.n) if spec.use_pi else None
        zr = spec.out_size
        self.fc1 = nn.Linear(spec.flat_features(), zr)
        self.bn_fc = nn.BatchNorm1d(zr)
        self.fc2 = nn.Linear(zr, zr)
        self.act = nn.ReLU() if spec.final_activation == "relu" else nn.Softplus()

    def _check_inputs(self, x: torch.Tensor, cmatrix: torch.Tensor | None) -> torch.Tensor:
        if x.dim() == 1:
            x = x[None]
        if x.dim() != 2 or x.shape[1] != self.spec.n:
            raise ShapeMismatch(
                f"expected measurements (batch, {self.spec.n}), got {tuple(x.shape)}"
            )
        if self.spec.use_pi:
            if cmatrix is None:
                raise MissingPI(f"{self.spec.variant_name} requires the cmatrix tensor")
            if tuple(cmatrix.shape) != (self.spec.n, self.spec.numz, self.spec.numr):
                raise ShapeMismatch(
                    f"cmatrix shape {tuple(cmatrix.shape)} != "
                    f"({self.spec.n}, {self.spec.numz}, {self.spec.numr})"
                )
        return x

    def features(self, x: torch.Tensor, cmatrix: torch.Tensor | None = None) -> torch.Tensor:
        """Pre-head feature block (after fusion for PI variants)."""
        x = self._check_inputs(x, cmatrix)
        dtype = self.fc1.weight.dtype
        planes = broadcast_measurements(x.to(dtype), self.spec.numz, self.spec.numr)
        feats = self.backbone(planes)
        if self.spec.use_pi:
            pi = self.side_chain(cmatrix.to(dtype)[None])
            feats = fuse(feats, pi)
        return feats

    def forward(self, x: torch.Tensor, cmatrix: torch.Tensor | None = None) -> torch.Tensor:
        feats = self.features(x, cmatrix)
        flat = feats.flatten(start_dim=1)
        hidden = self.act(self.bn_fc(self.fc1(flat)))
        return self.act(self.fc2(hidden))


def build_model(spec: ModelSpec, seed: int | None = None) -> SurrogateNet:
    """Construct a variant; when ``seed`` is given, initialize weights."""
    model = SurrogateNet(spec)
    if seed is not None:
        init_weights(model, seed)
    return model


def init_weights(model: nn.Module, seed: int) -> None:
    """Deterministic init: fan-in scaled normal weights, zero biases.

    Conv and linear weights draw N(0, 2/fan_in); norm layers reset to
    gamma 1, beta 0, fresh running statistics.  Module traversal order is
    fixed by construction, so a seed pins every weight.

    The side chain's last norm layer instead starts at gamma 0, beta 1:
    the fused mask is then exactly 1 everywhere on the first step, so a
    fused variant begins as its plain twin and the modulation fades in as
    the side chain learns.  A random mask would instead zero roughly half
    the backbone features at init (batch norm centers each channel, the
    rectifier kills the negative side), which cripples short runs.
    """
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            else:
                fan_in = module.in_features
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                noise = torch.randn(module.weight.shape, generator=gen, dtype=torch.float32)
                module.weight.copy_(noise.to(module.weight.dtype) * std)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
            module.reset_parameters()
            module.reset_running_stats()
    side = getattr(model, "side_chain", None)
    if side is not None:
        gate = side.stack[-2][1]
        with torch.no_grad():
            gate.weight.zero_()
            gate.bias.fill_(1.0)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def param_table(model: nn.Module) -> list[tuple[str, tuple[int, ...], int]]:
    """Per-parameter (name, shape, count) rows in registration order."""
    return [(name, tuple(p.shape), p.numel()) for name, p in model.named_parameters()]


def describe_params(model: nn.Module) -> str:
    rows = param_table(model)
    width = max(len(name) for name, _, _ in rows)
    lines = [f"{name:<{width}}  {str(shape):<20} {count:>12,}" for name, shape, count in rows]
    lines.append(f"{'total':<{width}}  {'':<20} {count_parameters(model):>12,}")
    return "\n".join(lines)


@dataclass(frozen=True)
class FusionProbe:
    """Weight gradients of a single linear neuron under one fusion mode."""

    mode: str
    output: float
    grad_w: np.ndarray
    grad_w_static: np.ndarray | None


def fusion_gradient_probe(
    mode: str,
    x,
    x_static,
    w=None,
    w_static=None,
    bias: float = 0.0,
) -> FusionProbe:
    """Analytic d(output)/d(weights) for one neuron over two fused inputs.

    Modes combine a dynamic input x with a static input x':
      add      out = w . (x + x') + b    -> dout/dw = x + x'
      concat   out = w . x + w' . x' + b -> dout/dw = x, dout/dw' = x'
      multiply out = w . (x * x') + b    -> dout/dw = x * x'
    Only the multiplicative mode's weight gradient carries the static
    input as a factor on the dynamic one; in add mode, dout/dx = w does
    not involve the static input at all.
    """
    x = np.asarray(x, dtype=np.float64)
    x_static = np.asarray(x_static, dtype=np.float64)
    if x.shape != x_static.shape:
        raise ShapeMismatch(f"input shapes differ: {x.shape} vs {x_static.shape}")
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=np.float64)
    if mode == "add":
        return FusionProbe("add", float(w @ (x + x_static) + bias), x + x_static, None)
    if mode == "concat":
        w2 = np.ones_like(x_static) if w_static is None else np.asarray(w_static, np.float64)
        out = float(w @ x + w2 @ x_static + bias)
        return FusionProbe("concat", out, x.copy(), x_static.copy())
    if mode == "multiply":
        return FusionProbe("multiply", float(w @ (x * x_static) + bias), x * x_static, None)
    raise InvalidSpec(f"unknown fusion mode {mode!r}")


def save_checkpoint(model: SurrogateNet, path: str) -> None:
    """Write magic + header JSON + one little-endian float32 blob.

    The header carries the model spec, its hash, and a tensor directory of
    {name, shape, offset} in element units.  Integer state (batch norm
    step counters) is stored as float32; values are far below the exact
    integer range of that type.
    """
    entries = []
    chunks = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype != np.float32:
            if arr.size and np.max(np.abs(arr)) >= 2**24:
                raise FormatError(f"tensor {name} exceeds exact float32 integer range")
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        chunks.append(arr.reshape(-1))
        offset += arr.size
    header = {
        "format_version": 1,
        "spec": model.spec.to_dict(),
        "spec_hash": model.spec.spec_hash(),
        "tensors": entries,
    }
    payload = json.dumps(header).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(np.uint32(len(payload)).tobytes())
            fh.write(payload)
            blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
            fh.write(blob.astype("<f4").tobytes())
    except OSError as exc:
        raise StoreIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str, expected_spec: ModelSpec | None = None) -> SurrogateNet:
    """Rebuild the model from a checkpoint and restore all state."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StoreIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint (bad magic)")
    head_len = int(np.frombuffer(raw, dtype="<u4", count=1, offset=len(CHECKPOINT_MAGIC))[0])
    body_start = len(CHECKPOINT_MAGIC) + 4
    try:
        header = json.loads(raw[body_start : body_start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header: {exc}") from exc
    if header.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported checkpoint version")
    spec = ModelSpec.from_dict(header["spec"])
    if header.get("spec_hash") != spec.spec_hash():
        raise FormatError(f"{path}: spec hash does not match stored spec")
    if expected_spec is not None and spec != expected_spec:
        raise SpecMismatch(
            f"checkpoint holds {spec.variant_name} {spec.to_dict()}, "
            f"expected {expected_spec.to_dict()}"
        )
    blob = np.frombuffer(raw, dtype="<f4", offset=body_start + head_len)
    model = SurrogateNet(spec)
    state = model.state_dict()
    names = {e["name"] for e in header["tensors"]}
    if names != set(state.keys()):
        raise FormatError(f"{path}: tensor directory does not match the model layout")
    total = sum(int(np.prod(e["shape"])) for e in header["tensors"])
    if blob.size != total:
        raise FormatError(f"{path}: blob holds {blob.size} values, directory implies {total}")
    new_state = {}
    for entry in header["tensors"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        count = int(np.prod(shape)) if shape else 1
        if tuple(state[name].shape) != shape:
            raise FormatError(f"{path}: tensor {name} has shape {shape}, model expects "
                              f"{tuple(state[name].shape)}")
        values = blob[off : off + count].reshape(shape)
        new_state[name] = torch.as_tensor(np.array(values)).to(state[name].dtype)
    model.load_state_dict(new_state)
    return model
