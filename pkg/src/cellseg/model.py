"""The cellular automaton: configuration, parameters, and the update step.

Every pixel hosts a cell with a d-dimensional state.  One step concatenates
the state with the environment channels, runs the shared 4-layer update
network, optionally mixes in reset noise through a learned gate, and commits
the transition only on cells whose Bernoulli coin came up heads.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .rng import RngStream
from .tensor import Tensor, check_finite, parameter

ENV_CHANNELS = 3        # RGB environment
ENCODED_CHANNELS = 8    # channels after the stride-2 encoder


class ConfigError(ValueError):
    pass


@dataclass
class ArchConfig:
    cell_size: int = 48
    hidden_size: int = 64
    first_layer: str = "full3x3"        # or "depthwise"
    norm_kind: str = "instance"         # none | batch_live | instance | channel
    residual: bool = True
    resettable: bool = True
    num_classes: int = 3
    update_prob: float = 0.5
    freeze_spatial_filters: bool = False
    resolution_factor: int = 1          # 1: state at image resolution, 2: image is 2x state

    def validate(self) -> "ArchConfig":
        if self.cell_size < 1 or self.hidden_size < 1:
            raise ConfigError("cell_size and hidden_size must be >= 1")
        if self.first_layer not in ("full3x3", "depthwise"):
            raise ConfigError(f"first_layer {self.first_layer!r} unknown")
        if self.norm_kind not in ops.NORM_KINDS:
            raise ConfigError(f"norm_kind {self.norm_kind!r} unknown")
        if not 0.0 < self.update_prob <= 1.0:
            raise ConfigError("update_prob must be in (0, 1]")
        if self.resolution_factor not in (1, 2):
            raise ConfigError("resolution_factor must be 1 or 2")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        return self

    @property
    def env_channels(self) -> int:
        return ENV_CHANNELS if self.resolution_factor == 1 else ENCODED_CHANNELS


@dataclass
class CellGrid:
    """The colony state, (batch, h_s, w_s, cell_size)."""
    state: Tensor

    @property
    def shape(self):
        return self.state.shape


@dataclass
class Environment:
    """Per-pixel input channels: raw RGB in [-0.5, 0.5], plus the encoded
    form when the state runs at half the image resolution."""
    pixels: Tensor
    encoded: Optional[Tensor] = None

    def input_for(self, cfg: ArchConfig) -> Tensor:
        if cfg.resolution_factor == 1:
            return self.pixels
        if self.encoded is None:
            raise ValueError("encoded environment missing (resolution_factor=2)")
        return self.encoded


@dataclass
class StepDiag:
    mean_gate: Optional[np.ndarray]   # per batch entry, None when not resettable
    hidden: Tensor


class UpdateRuleParams:
    """All learned tensors, in a fixed manifest order."""

    def __init__(self, tensors: dict[str, Tensor], cfg: ArchConfig):
        self.tensors = tensors
        self.cfg = cfg

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def manifest(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "UpdateRuleParams":
        out = {}
        for name, t in self.tensors.items():
            c = parameter(t.data.copy())
            c.requires_grad = t.requires_grad
            out[name] = c
        return UpdateRuleParams(out, self.cfg)


def _glorot(rng: RngStream, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ((rng.uniform(shape) * 2.0 - 1.0) * limit).astype(np.float32)


def init_params(cfg: ArchConfig, rng: RngStream) -> UpdateRuleParams:
    """Fresh parameters.  The last update layer starts at zero so the colony
    opens as (noisy) identity dynamics; the gate starts at r=0.5."""
    cfg.validate()
    d, hid, c = cfg.cell_size, cfg.hidden_size, cfg.num_classes
    cin = d + cfg.env_channels
    t: dict[str, Tensor] = {}

    def conv_kernel(name, kh, cin_, cout_, zero=False, frozen=False):
        fan = kh * kh
        if zero:
            k = np.zeros((kh, kh, cin_, cout_), dtype=np.float32)
        else:
            k = _glorot(rng, (kh, kh, cin_, cout_), fan * cin_, fan * cout_)
        kt = parameter(k)
        kt.requires_grad = not frozen
        t[f"{name}/kernel"] = kt
        t[f"{name}/bias"] = parameter(np.zeros(cout_, dtype=np.float32))

    if cfg.first_layer == "full3x3":
        conv_kernel("layer1", 3, cin, hid, frozen=cfg.freeze_spatial_filters)
    else:
        dw = parameter(_glorot(rng, (3, 3, cin), 9, 9))
        dw.requires_grad = not cfg.freeze_spatial_filters
        t["layer1_dw/kernel"] = dw
        t["layer1_dw/bias"] = parameter(np.zeros(cin, dtype=np.float32))
        conv_kernel("layer1_pw", 1, cin, hid)
    conv_kernel("layer2", 1, hid, hid)
    conv_kernel("layer3", 1, hid, hid)
    conv_kernel("layer4", 1, hid, d, zero=True)

    if cfg.norm_kind != "none":
        for i in (1, 2, 3):
            t[f"norm{i}/gain"] = parameter(np.ones(hid, dtype=np.float32))
            t[f"norm{i}/bias"] = parameter(np.zeros(hid, dtype=np.float32))

    if cfg.resettable:
        t["gate/kernel"] = parameter(np.zeros((1, 1, hid, 1), dtype=np.float32))
        t["gate/bias"] = parameter(np.zeros(1, dtype=np.float32))

    if cfg.resolution_factor == 1:
        conv_kernel("head", 1, d, c)
    else:
        conv_kernel("encoder", 3, ENV_CHANNELS, ENCODED_CHANNELS)
        t["decoder/kernel"] = parameter(
            _glorot(rng, (3, 3, c, d), 9 * d, 9 * c))
        t["decoder/bias"] = parameter(np.zeros(c, dtype=np.float32))

    return UpdateRuleParams(t, dataclasses.replace(cfg))


def param_breakdown(cfg: ArchConfig) -> dict[str, int]:
    """Closed-form parameter counts by group (see also the manifest test)."""
    d, hid, c = cfg.cell_size, cfg.hidden_size, cfg.num_classes
    cin = d + cfg.env_channels
    if cfg.first_layer == "full3x3":
        layer1 = 9 * cin * hid + hid
    else:
        layer1 = (9 * cin + cin) + (cin * hid + hid)
    update = layer1 + 2 * (hid * hid + hid) + (hid * d + d)
    norm = 6 * hid if cfg.norm_kind != "none" else 0
    gate = hid + 1 if cfg.resettable else 0
    if cfg.resolution_factor == 1:
        head = d * c + c
        adapters = 0
    else:
        head = 0
        adapters = (9 * ENV_CHANNELS * ENCODED_CHANNELS + ENCODED_CHANNELS) \
            + (9 * c * d + c)
    total = update + norm + gate + head + adapters
    return {"update": update, "norm": norm, "gate": gate,
            "head": head, "adapters": adapters, "total": total}


def param_count(cfg: ArchConfig) -> int:
    return param_breakdown(cfg)["total"]


def init_state(batch: int, h: int, w: int, d: int, rng: RngStream) -> CellGrid:
    """C0 ~ N(0,1) i.i.d. per cell per channel."""
    if min(batch, h, w, d) < 1:
        raise ValueError("state extents must be positive")
    return CellGrid(Tensor(rng.normal((batch, h, w, d))))


def _update_net(x: Tensor, params: UpdateRuleParams, cfg: ArchConfig) -> tuple[Tensor, Tensor]:
    """Shared hidden chain; returns (H, U)."""
    nk = cfg.norm_kind

    def norm(h, i):
        if nk == "none":
            return h
        return ops.normalize(h, nk, params[f"norm{i}/gain"], params[f"norm{i}/bias"])

    if cfg.first_layer == "full3x3":
        h = ops.conv2d(x, params["layer1/kernel"], params["layer1/bias"])
    else:
        h = ops.depthwise_conv3x3(x, params["layer1_dw/kernel"], params["layer1_dw/bias"])
        h = ops.conv2d(h, params["layer1_pw/kernel"], params["layer1_pw/bias"])
    h = ops.relu(norm(h, 1))
    h = ops.relu(norm(ops.conv2d(h, params["layer2/kernel"], params["layer2/bias"]), 2))
    h = ops.relu(norm(ops.conv2d(h, params["layer3/kernel"], params["layer3/bias"]), 3))
    u = ops.conv2d(h, params["layer4/kernel"], params["layer4/bias"])
    return h, u


def step(grid: CellGrid, env: Environment, params: UpdateRuleParams, cfg: ArchConfig,
         rng_mask: RngStream, rng_noise: RngStream,
         step_index: Optional[int] = None) -> tuple[CellGrid, StepDiag]:
    """One synchronous update with the per-cell Bernoulli commit mask."""
    state = grid.state
    b, h, w, d = state.shape
    env_in = env.input_for(cfg)
    if env_in.shape[:3] != (b, h, w):
        raise ValueError(f"environment {env_in.shape} does not match state {state.shape}")

    x = ops.concat_channels([state, env_in])
    hidden, u = _update_net(x, params, cfg)
    candidate = ops.add(u, state) if cfg.residual else u

    mean_gate = None
    if cfg.resettable:
        r = ops.sigmoid(ops.conv2d(hidden, params["gate/kernel"], params["gate/bias"]))
        z = Tensor(rng_noise.normal((b, h, w, d)))
        gated = ops.add(ops.mul(z, r), ops.mul(candidate, ops.scale(r, -1.0, 1.0)))
        mean_gate = r.data.mean(axis=(1, 2, 3))
    else:
        gated = candidate

    m = Tensor(rng_mask.bernoulli(cfg.update_prob, (b, h, w, 1)))
    new_state = ops.add(ops.mul(gated, m), ops.mul(state, ops.scale(m, -1.0, 1.0)))

    where = f"state after step {step_index}" if step_index is not None else "state after step"
    check_finite(new_state.data, where)
    return CellGrid(new_state), StepDiag(mean_gate=mean_gate, hidden=hidden)


def predict_logits(grid: CellGrid, params: UpdateRuleParams, cfg: ArchConfig) -> Tensor:
    """Per-pixel class logits at image resolution (no softmax)."""
    if cfg.resolution_factor == 1:
        return ops.conv2d(grid.state, params["head/kernel"], params["head/bias"])
    return ops.transpose_conv2d_s2(grid.state, params["decoder/kernel"], params["decoder/bias"])


def encode_env(image: Tensor, params: UpdateRuleParams) -> Tensor:
    """Stride-2 reduction of the RGB image to the state resolution (8 channels)."""
    b, h, w, c = image.shape
    if h % 2 or w % 2:
        raise ValueError(f"image extents must be even for encoding, got {h}x{w}")
    if c != ENV_CHANNELS:
        raise ValueError(f"expected {ENV_CHANNELS} image channels, got {c}")
    return ops.conv2d(image, params["encoder/kernel"], params["encoder/bias"], stride=2)


def make_environment(image: Tensor, params: UpdateRuleParams, cfg: ArchConfig) -> Environment:
    if cfg.resolution_factor == 1:
        return Environment(pixels=image)
    return Environment(pixels=image, encoded=encode_env(image, params))


def state_rgb(grid: CellGrid) -> np.ndarray:
    """First three state channels mapped per frame to [0,1] for display."""
    s = grid.state.data
    if s.shape[3] < 3:
        raise ValueError("state has fewer than 3 channels")
    rgb = s[..., :3].astype(np.float64)
    out = np.empty_like(rgb)
    for i in range(rgb.shape[0]):
        lo, hi = np.percentile(rgb[i], [1.0, 99.0])
        if hi - lo < 1e-12:
            out[i] = 0.5
        else:
            out[i] = np.clip((rgb[i] - lo) / (hi - lo), 0.0, 1.0)
    return out.astype(np.float32)
