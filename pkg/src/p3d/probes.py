"""Multiscale dense readout probes over frozen feature grids.

A probe consumes three feature stages (coarsest first), projects each with a
1x1 conv, refines with a 3x3 conv + relu, and fuses coarse-to-fine: the
running sum is upsampled to the next stage's resolution, added, and passed
through a 3x3 conv + relu.  A final 3x3 head maps the fused map to the
output channels at one quarter of the input image resolution.

Two heads are supported:
    * depth: 256 bin logits; the depth map is the softmax-weighted mean of
      uniformly spaced bin centers over a configured (d_min, d_max) range.
    * surface normals: 4 raw channels; the first three are L2-normalized
      into a unit direction, the fourth passes through softplus and acts as
      a per-pixel concentration (confidence) value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ShapeError
from .tensorcore import Tensor

DEPTH_BINS = 256
NORMAL_CHANNELS = 4
OUTPUT_STRIDE = 4
NORMAL_EPS = 1e-8


@dataclass(frozen=True)
class ProbeConfig:
    """Architecture hyperparameters for a dense probe.

    ``stage_channels`` lists the incoming feature channels per used stage,
    coarsest first.  ``out_channels`` must be 256 (depth bins) or 4 (normal
    direction + concentration).  The probe always emits at 1/4 of the image
    resolution (``output_stride``).
    """

    stage_channels: tuple[int, int, int]
    out_channels: int
    hidden_width: int = 128
    used_stages: tuple[int, int, int] = (0, 1, 2)
    output_stride: int = OUTPUT_STRIDE

    def __post_init__(self):
        if len(self.stage_channels) != 3:
            raise ConfigError(
                f"probe takes exactly 3 stages, got {len(self.stage_channels)} channel entries"
            )
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage channels must be positive, got {self.stage_channels}")
        if self.out_channels not in (DEPTH_BINS, NORMAL_CHANNELS):
            raise ConfigError(
                f"out_channels must be {DEPTH_BINS} (depth) or {NORMAL_CHANNELS} (normals), "
                f"got {self.out_channels}"
            )
        if self.hidden_width < 1:
            raise ConfigError(f"hidden_width must be positive, got {self.hidden_width}")
        if len(self.used_stages) != 3:
            raise ConfigError(f"used_stages must name 3 stages, got {self.used_stages}")
        if self.output_stride != OUTPUT_STRIDE:
            raise ConfigError(f"output stride is fixed at {OUTPUT_STRIDE}")

    def to_dict(self) -> dict:
        return {
            "stage_channels": list(self.stage_channels),
            "out_channels": self.out_channels,
            "hidden_width": self.hidden_width,
            "used_stages": list(self.used_stages),
            "output_stride": self.output_stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        try:
            return cls(
                stage_channels=tuple(d["stage_channels"]),
                out_channels=int(d["out_channels"]),
                hidden_width=int(d["hidden_width"]),
                used_stages=tuple(d["used_stages"]),
                output_stride=int(d.get("output_stride", OUTPUT_STRIDE)),
            )
        except KeyError as e:
            raise ConfigError(f"probe config missing field {e}") from None


def select_stages(total_blocks: int, family: str) -> tuple[int, int, int]:
    """Pick the three feature stages a probe reads from a backbone with
    ``total_blocks`` blocks.

    Blocks split into four groups (remainder goes to the last group); the
    stage ids are the 1-based indices of the blocks that end each group.
    Encoders read the latter three group ends; decoders of generative
    models, whose late blocks are the shallow high-resolution ones, read
    the earlier three.
    """
    if total_blocks < 4:
        raise ConfigError(f"need at least 4 blocks to form stages, got {total_blocks}")
    if family not in ("encoder", "diffusion_decoder"):
        raise ConfigError(f"unknown model family {family!r}")
    size = total_blocks // 4
    bounds = [size, 2 * size, 3 * size, total_blocks]
    if family == "encoder":
        return tuple(bounds[1:])
    return tuple(bounds[:3])


@dataclass
class DenseProbe:
    """A probe's configuration plus its named parameter tensors."""

    config: ProbeConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, self.params[k]) for k in sorted(self.params)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def param_count(config: ProbeConfig) -> int:
    """Closed-form parameter count for a probe with this configuration."""
    w = config.hidden_width
    total = 0
    for c in config.stage_channels:
        total += c * w + w  # 1x1 projection
        total += w * w * 9 + w  # 3x3 refinement
    total += 2 * (w * w * 9 + w)  # fusion convs after the two summations
    total += w * config.out_channels * 9 + config.out_channels  # 3x3 head
    return total


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_probe(config: ProbeConfig, seed: int, dtype=np.float32) -> DenseProbe:
    """Create a probe with Kaiming-uniform (fan-in) weights and zero biases.

    The same (config, seed) pair always produces bitwise-identical
    parameters.
    """
    rng = np.random.default_rng(seed)
    w = config.hidden_width
    params: dict[str, Tensor] = {}

    def conv_param(name: str, out_c: int, in_c: int, k: int):
        params[f"{name}_w"] = tc.tensor(
            _kaiming_uniform(rng, (out_c, in_c, k, k), dtype),
            requires_grad=True,
            dtype=dtype,
            name=f"{name}_w",
        )
        params[f"{name}_b"] = tc.tensor(
            np.zeros(out_c, dtype=dtype), requires_grad=True, dtype=dtype, name=f"{name}_b"
        )

    for s, c in enumerate(config.stage_channels):
        conv_param(f"proj{s}", w, c, 1)
        conv_param(f"refine{s}", w, w, 3)
    for s in (1, 2):
        conv_param(f"fuse{s}", w, w, 3)
    conv_param("head", config.out_channels, w, 3)
    return DenseProbe(config=config, params=params)


def _upsample_to(x: Tensor, target_hw: tuple[int, int]) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    th, tw = target_hw
    if (h, w) == (th, tw):
        return x
    if th % h or tw % w or th // h != tw // w:
        raise ShapeError(
            f"cannot upsample ({h}, {w}) to ({th}, {tw}): target must be an integer multiple"
        )
    return tc.bilinear_upsample(x, th // h)


def probe_forward(probe: DenseProbe, features: list[Tensor], out_hw: tuple[int, int]) -> Tensor:
    """Run the probe over three feature stages, coarsest first.

    ``features`` are NCHW tensors whose channel counts match the config and
    whose resolutions are non-decreasing along the list.  ``out_hw`` is the
    target output resolution (image height/4, width/4); the fused map is
    bilinearly upsampled to it before the head.
    """
    cfg = probe.config
    if len(features) != 3:
        raise ShapeError(f"probe expects 3 feature stages, got {len(features)}")
    stage_maps: list[Tensor] = []
    for s, f in enumerate(features):
        if f.values.ndim != 4:
            raise ShapeError(f"stage {s} features must be NCHW, got shape {f.shape}")
        if f.shape[1] != cfg.stage_channels[s]:
            raise ShapeError(
                f"stage {s} has {f.shape[1]} channels, config expects {cfg.stage_channels[s]}"
            )
        p = probe.params
        x = tc.conv2d(f, p[f"proj{s}_w"], p[f"proj{s}_b"])
        x = tc.relu(tc.conv2d(x, p[f"refine{s}_w"], p[f"refine{s}_b"], padding=1))
        stage_maps.append(x)

    fused = stage_maps[0]
    for s in (1, 2):
        nxt = stage_maps[s]
        if nxt.shape[2] < fused.shape[2] or nxt.shape[3] < fused.shape[3]:
            raise ShapeError(
                f"stage resolutions must be non-decreasing, got {fused.shape} then {nxt.shape}"
            )
        fused = _upsample_to(fused, (nxt.shape[2], nxt.shape[3]))
        fused = tc.add(fused, nxt)
        fused = tc.relu(tc.conv2d(fused, probe.params[f"fuse{s}_w"], probe.params[f"fuse{s}_b"],
                                  padding=1))

    fused = _upsample_to(fused, out_hw)
    return tc.conv2d(fused, probe.params["head_w"], probe.params["head_b"], padding=1)


# ---------------------------------------------------------------------------
# Head decoders
# ---------------------------------------------------------------------------


@dataclass
class DepthPrediction:
    """Per-pixel bin probabilities and their weighted-mean depth map."""

    bin_probs: Tensor  # (N, 256, H, W)
    depth: Tensor  # (N, 1, H, W)
    depth_range: tuple[float, float]


@dataclass
class NormalPrediction:
    """Unit normal directions plus a positive per-pixel concentration."""

    normal: Tensor  # (N, 3, H, W)
    kappa: Tensor  # (N, 1, H, W)


def bin_centers(depth_range: tuple[float, float], n_bins: int = DEPTH_BINS) -> np.ndarray:
    """Centers of ``n_bins`` uniform bins spanning (d_min, d_max)."""
    d_min, d_max = float(depth_range[0]), float(depth_range[1])
    if not d_max > d_min:
        raise ConfigError(f"depth range must satisfy d_min < d_max, got ({d_min}, {d_max})")
    k = np.arange(n_bins, dtype=np.float64)
    return d_min + (k + 0.5) * (d_max - d_min) / n_bins


def depth_from_bins(logits: Tensor, depth_range: tuple[float, float]) -> DepthPrediction:
    """Convert 256-channel bin logits into a depth map.

    The depth at each pixel is the probability-weighted mean of the bin
    centers, so it always lies strictly inside (d_min, d_max).
    """
    if logits.values.ndim != 4 or logits.shape[1] != DEPTH_BINS:
        raise ShapeError(f"depth logits must be (N, {DEPTH_BINS}, H, W), got {logits.shape}")
    centers = bin_centers(depth_range)
    probs = tc.softmax_channels(logits)
    depth = tc.channel_dot(probs, centers)
    return DepthPrediction(bin_probs=probs, depth=depth, depth_range=(depth_range[0], depth_range[1]))


def normal_from_raw(raw: Tensor) -> NormalPrediction:
    """Split a 4-channel head output into unit normals and concentration."""
    if raw.values.ndim != 4 or raw.shape[1] != NORMAL_CHANNELS:
        raise ShapeError(f"normal head output must be (N, {NORMAL_CHANNELS}, H, W), got {raw.shape}")
    direction = tc.l2normalize_channels(tc.channel_slice(raw, 0, 3), eps=NORMAL_EPS)
    kappa = tc.softplus(tc.channel_slice(raw, 3, 4))
    return NormalPrediction(normal=direction, kappa=kappa)
