"""The model registry: which backbones exist, where their checkpoints live,
which layers are tapped, and what input resolution each one expects.

Every entry emits exactly four feature blocks per image.  For transformer
encoders the backbone's layers are split into four equal groups and the
last layer of each group is tapped; for the denoising UNet the four decoder
stages are tapped.  Input sides are chosen so token grids are comparable
across patch sizes: patch-16 backbones run at 480 px and patch-14 at
420 px, both yielding 30x30 token grids (a documented default; published
training code does not pin these sizes).

Checkpoint-backed entries carry the download page and the expected file
name under the cache directory (``<cache>/<model_id>/<filename>``); this
build bundles no neural runtime, so their value here is resolution/block
metadata and actionable errors.  The self-contained entries (no checkpoint)
compute deterministic features locally and run everywhere — see
:mod:`p3d_extractor.features`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, MissingCheckpointError

__all__ = [
    "FAMILIES",
    "CheckpointSource",
    "BlockRule",
    "ResolutionRule",
    "DiffusionOptions",
    "ModelSpec",
    "list_models",
    "get_model",
    "builtin_models",
]

FAMILIES = ("ssl", "classification", "vision_language", "generation", "dense")


@dataclass(frozen=True)
class CheckpointSource:
    """Where a published checkpoint comes from and what file to expect."""

    url: str
    filename: str

    def resolve(self, cache_dir, model_id: str) -> Path:
        """Return the cached checkpoint path, or fail with instructions."""
        target = Path(cache_dir) / model_id / self.filename
        if not target.is_file():
            raise MissingCheckpointError(
                f"checkpoint for model {model_id!r} not found at {target}; "
                f"download it from {self.url} and place it there"
            )
        return target


@dataclass(frozen=True)
class BlockRule:
    """Which four stages of a backbone are tapped for feature grids."""

    unit: str  # "encoder_layer" | "decoder_stage" | "pyramid_scale"
    taps: tuple[int, int, int, int]

    def __post_init__(self):
        taps = tuple(int(t) for t in self.taps)
        if len(taps) != 4 or list(taps) != sorted(set(taps)) or taps[0] < 0:
            raise ConfigError(
                f"a block rule taps exactly 4 distinct ascending stages, "
                f"got {self.taps}"
            )
        object.__setattr__(self, "taps", taps)


@dataclass(frozen=True)
class ResolutionRule:
    """Input size (H, W) fed to the backbone and the grid each block emits."""

    input_size: tuple[int, int]
    grids: tuple[tuple[int, int], ...]

    def __post_init__(self):
        input_size = (int(self.input_size[0]), int(self.input_size[1]))
        grids = tuple((int(h), int(w)) for h, w in self.grids)
        if min(input_size) < 1:
            raise ConfigError(f"input size must be positive, got {input_size}")
        if len(grids) != 4 or any(min(g) < 1 for g in grids):
            raise ConfigError(
                f"a resolution rule declares 4 nonempty grids, got {self.grids}"
            )
        object.__setattr__(self, "input_size", input_size)
        object.__setattr__(self, "grids", grids)


@dataclass(frozen=True)
class DiffusionOptions:
    """How a denoising model is run for feature extraction: a single pass
    at a fixed low noise step with an unconditional (empty) prompt."""

    noise_level: int = 1
    prompt: str = ""


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to extract four feature blocks from one backbone."""

    model_id: str
    family: str
    architecture: str
    resolution: ResolutionRule
    blocks: BlockRule
    source: CheckpointSource | None = None
    diffusion: DiffusionOptions | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(
                f"unknown family {self.family!r} (known: {', '.join(FAMILIES)})"
            )
        if self.diffusion is not None and self.family != "generation":
            raise ConfigError(
                "diffusion options only apply to generation-family models"
            )


def _vit(patch: int, depth: int, grid: int = 30):
    """Resolution + block rules for a plain ViT at a target token grid."""
    side = grid * patch
    group = depth // 4
    taps = tuple(group * (k + 1) - 1 for k in range(4))
    return (
        ResolutionRule(input_size=(side, side), grids=((grid, grid),) * 4),
        BlockRule(unit="encoder_layer", taps=taps),
    )


def _entry(model_id, family, architecture, layout, url=None, filename=None,
           diffusion=None) -> ModelSpec:
    resolution, blocks = layout
    source = None
    if url is not None:
        source = CheckpointSource(url=url, filename=filename)
    return ModelSpec(
        model_id=model_id, family=family, architecture=architecture,
        resolution=resolution, blocks=blocks, source=source,
        diffusion=diffusion,
    )


_UNET_LAYOUT = (
    ResolutionRule(
        input_size=(512, 512),
        grids=((8, 8), (16, 16), (32, 32), (64, 64)),
    ),
    BlockRule(unit="decoder_stage", taps=(0, 1, 2, 3)),
)

_PYRAMID_LAYOUT = (
    ResolutionRule(input_size=(480, 480), grids=((30, 30),) * 4),
    BlockRule(unit="pyramid_scale", taps=(0, 1, 2, 3)),
)


ZOO: dict[str, ModelSpec] = {
    spec.model_id: spec
    for spec in (
        # Self-contained reference extractors (no checkpoint; run offline).
        _entry("pyramid16", "dense", "stat_pyramid", _PYRAMID_LAYOUT),
        # Published checkpoints (metadata + actionable resolution only).
        _entry("dino_b16", "ssl", "vit_b16", _vit(16, 12),
               url="https://github.com/facebookresearch/dino",
               filename="dino_vitbase16_pretrain.pth"),
        _entry("ibot_b16", "ssl", "vit_b16", _vit(16, 12),
               url="https://github.com/bytedance/ibot",
               filename="checkpoint_teacher.pth"),
        _entry("mae_b16", "ssl", "vit_b16", _vit(16, 12),
               url="https://huggingface.co/facebook/vit-mae-base",
               filename="pytorch_model.bin"),
        _entry("dinov2_b14", "ssl", "vit_b14", _vit(14, 12),
               url="https://github.com/facebookresearch/dinov2",
               filename="dinov2_vitb14_pretrain.pth"),
        _entry("deit3_b16", "classification", "vit_b16", _vit(16, 12),
               url="https://github.com/facebookresearch/deit",
               filename="deit_3_base_224_21k.pth"),
        _entry("clip_b16", "vision_language", "vit_b16", _vit(16, 12),
               url="https://github.com/openai/CLIP",
               filename="ViT-B-16.pt"),
        _entry("siglip_b16", "vision_language", "vit_b16", _vit(16, 12),
               url="https://github.com/mlfoundations/open_clip",
               filename="open_clip_pytorch_model.bin"),
        _entry("sam_b16", "dense", "vit_b16", _vit(16, 12),
               url="https://github.com/facebookresearch/segment-anything",
               filename="sam_vit_b_01ec64.pth"),
        _entry("midas_l16", "dense", "vit_l16", _vit(16, 24),
               url="https://github.com/isl-org/MiDaS",
               filename="dpt_large-midas-2f21e586.pt"),
        _entry("stablediffusion_v21", "generation", "unet_sd21",
               _UNET_LAYOUT,
               url="https://huggingface.co/stabilityai/stable-diffusion-2-1",
               filename="v2-1_512-ema-pruned.safetensors",
               diffusion=DiffusionOptions(noise_level=1, prompt="")),
    )
}


def list_models() -> list[str]:
    """All registered model ids, sorted."""
    return sorted(ZOO)


def builtin_models() -> list[str]:
    """Ids of the self-contained models that run without a checkpoint."""
    return [m for m in list_models() if ZOO[m].source is None]


def get_model(model_id: str) -> ModelSpec:
    spec = ZOO.get(model_id)
    if spec is None:
        raise ConfigError(
            f"unknown model {model_id!r}; available: {', '.join(list_models())}"
        )
    return spec
