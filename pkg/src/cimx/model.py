"""Small convolutional backbone with two logical branches over shared weights.

The ReLU branch is the incremental classifier being trained; the mask
branch evaluates the very same conv/norm/classifier tensors but swaps every
activation site for a learnable rational unit. Only those units (phi)
belong to the mask branch; updating them never touches the shared weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CorruptStore, ShapeMismatch
from .pau import PauActivation, PAUParams

CHECKPOINT_VERSION = 1


class Branch(Enum):
    RELU = "relu"
    CIM = "cim"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture knobs; the default is the 4-block desk-scale backbone.

    ``input_center`` is subtracted from the pixels in the stem, so the
    neutral input is mid-gray rather than black. Per-sample group
    normalization is available via ``norm="group"`` but off by default:
    standardizing right before the global average pool makes pooled
    features nearly input-independent at init, which stalls plain SGD.
    """

    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 96, 128)
    block_depth: int = 1
    image_size: int = 64
    norm: str = "none"
    norm_groups: int = 8
    input_center: float = 0.5
    pau_degree_m: int = 5
    pau_degree_n: int = 4


class _ConvUnit(nn.Module):
    """conv (+ optional norm); the activation is applied by the caller per branch."""

    def __init__(self, in_ch: int, out_ch: int, spec: ModelSpec):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False)
        nn.init.kaiming_normal_(self.conv.weight, mode="fan_out", nonlinearity="relu")
        if spec.norm == "group":
            self.norm = nn.GroupNorm(math.gcd(spec.norm_groups, out_ch), out_ch)
        elif spec.norm == "none":
            self.norm = nn.Identity()
        else:
            raise ValueError(f"unknown norm {spec.norm!r}")

    def forward(self, x):
        return self.norm(self.conv(x))


class DualBranchNet(nn.Module):
    """Backbone + linear classifier with one activation unit per conv site."""

    def __init__(self, spec: ModelSpec, classes: int):
        super().__init__()
        self.spec = spec
        units = []
        in_ch = spec.in_channels
        for ch in spec.channels:
            for _ in range(spec.block_depth):
                units.append(_ConvUnit(in_ch, ch, spec))
                in_ch = ch
        self.units = nn.ModuleList(units)
        self.paus = nn.ModuleList(PauActivation() for _ in units)
        self.classifier = nn.Linear(spec.channels[-1], classes, bias=False)

    @property
    def activation_sites(self) -> int:
        return len(self.paus)

    def _activate(self, x, site: int, branch: Branch):
        if branch is Branch.RELU:
            return F.relu(x)
        return self.paus[site](x)

    def spatial_features(self, x: torch.Tensor, branch: Branch) -> torch.Tensor:
        """Feature block before pooling, shape (B, C, h, w)."""
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeMismatch(f"expected (B, {self.spec.in_channels}, H, W), got {tuple(x.shape)}")
        min_side = 2 ** len(self.spec.channels)
        if x.shape[2] < min_side or x.shape[3] < min_side:
            raise ShapeMismatch(f"input {tuple(x.shape[2:])} smaller than {min_side} per side")
        x = x - self.spec.input_center
        site = 0
        depth = self.spec.block_depth
        for i, unit in enumerate(self.units):
            x = self._activate(unit(x), site, branch)
            site += 1
            if (i + 1) % depth == 0:
                x = F.max_pool2d(x, 2)
        return x

    def pooled_features(self, x: torch.Tensor, branch: Branch) -> torch.Tensor:
        return self.spatial_features(x, branch).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor, branch: Branch = Branch.RELU):
        features = self.spatial_features(x, branch)
        logits = self.classifier(features.mean(dim=(2, 3)))
        return features, logits


@dataclass
class ModelState:
    """Backbone weights, classifier, and per-site activation units."""

    net: DualBranchNet
    class_count: int

    def theta_parameters(self) -> list[torch.nn.Parameter]:
        return [p for unit in self.net.units for p in unit.parameters()]

    def omega_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.net.classifier.parameters())

    def phi_parameters(self) -> list[torch.nn.Parameter]:
        return [p for pau in self.net.paus for p in pau.parameters()]

    def phi_trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for pau in self.net.paus for p in pau.parameters() if p.requires_grad]

    def named_theta(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.net.named_parameters() if n.startswith("units.")}

    def cim_params(self) -> list[PAUParams]:
        return [pau.export_params() for pau in self.net.paus]

    def checksum(self, group: str = "all") -> str:
        """Hex digest of a parameter group; used to assert update scopes."""
        import hashlib

        if group == "theta":
            params = self.theta_parameters()
        elif group == "omega":
            params = self.omega_parameters()
        elif group == "phi":
            params = self.phi_parameters()
        else:
            params = list(self.net.parameters())
        h = hashlib.sha256()
        for p in params:
            h.update(p.detach().cpu().double().numpy().tobytes())
        return h.hexdigest()

    def clone(self) -> "ModelState":
        import copy

        return ModelState(net=copy.deepcopy(self.net), class_count=self.class_count)


def build_model(spec: ModelSpec, classes: int, seed: int) -> ModelState:
    """Construct a model with reproducible initialization."""
    torch.manual_seed(seed)
    net = DualBranchNet(spec, classes)
    return ModelState(net=net, class_count=classes)


def expand_classifier(state: ModelState, new_classes: int, seed: int) -> ModelState:
    """Append rows for new classes; existing rows (and theta, phi) carry over."""
    if new_classes < 1:
        raise ValueError("new_classes must be >= 1")
    net = state.net
    old = net.classifier
    grown = nn.Linear(old.in_features, old.out_features + new_classes, bias=False)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        fresh = torch.empty(new_classes, old.in_features, dtype=old.weight.dtype)
        fresh.normal_(0.0, 0.01, generator=gen)
        grown.weight[: old.out_features] = old.weight
        grown.weight[old.out_features :] = fresh
    grown = grown.to(old.weight.dtype)
    net.classifier = grown
    state.class_count += new_classes
    return state


def last_block_only_mode(state: ModelState, enabled: bool) -> ModelState:
    """Restrict trainable activation units to the last block (or re-enable all)."""
    net = state.net
    depth = net.spec.block_depth
    last_block_sites = set(range(len(net.paus) - depth, len(net.paus)))
    for site, pau in enumerate(net.paus):
        pau.trainable = (site in last_block_sites) or not enabled
    return state


def save_checkpoint(path, state: ModelState, class_order, rng_state=None, meta=None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "spec": asdict(state.net.spec),
        "class_count": state.class_count,
        "state_dict": state.net.state_dict(),
        "class_order": list(class_order),
        "rng_state": rng_state,
        "meta": meta or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ModelState, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CorruptStore(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CorruptStore(f"unsupported checkpoint version in {path}")
    spec_fields = dict(payload["spec"])
    spec_fields["channels"] = tuple(spec_fields["channels"])
    spec = ModelSpec(**spec_fields)
    net = DualBranchNet(spec, payload["class_count"])
    net.load_state_dict(payload["state_dict"])
    state = ModelState(net=net, class_count=payload["class_count"])
    info = {
        "class_order": payload["class_order"],
        "rng_state": payload["rng_state"],
        "meta": payload["meta"],
    }
    return state, info
