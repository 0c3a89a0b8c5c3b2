"""Feature extraction: images in, per-block feature-grid files out.

The self-contained models compute deterministic dense features with no
learned weights: the image is resized to the model's input size and, at
four smoothing scales (the "blocks"), per-cell statistics are pooled on the
token grid — color means, local contrast, gradient energy, a Laplacian
response, and the cell's normalized position.  That gives every pipeline
stage downstream (feature files, probing, matching) something real to chew
on without any checkpoint.

Checkpoint-backed models resolve their weights from the local cache and
fail with a download pointer when absent; this build bundles no neural
runtime to run them (see :mod:`p3d_extractor.models`).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError
from .formats import FeatureBlock, FeatureGrids, write_feature_file
from .models import ModelSpec, builtin_models

__all__ = [
    "default_cache_dir",
    "load_image",
    "extract_features",
    "FEATURE_SUFFIX",
]

FEATURE_SUFFIX = ".p3df"

_PYRAMID_SIGMAS = (0.0, 2.0, 4.0, 8.0)
_PYRAMID_CHANNELS = 12


def default_cache_dir() -> Path:
    """Checkpoint cache root: $P3D_EXTRACTOR_CACHE or ~/.cache/p3d-extractor."""
    env = os.environ.get("P3D_EXTRACTOR_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "p3d-extractor"


def load_image(path) -> Image.Image:
    """Open an image as RGB, with errors that name the file."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None


def _resized_array(img: Image.Image, input_size: tuple[int, int]) -> np.ndarray:
    h, w = input_size
    resized = img.resize((w, h), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float64) / 255.0


def _cell_pool(values: np.ndarray, grid: tuple[int, int]):
    """View an (H, W) array as (gh, ch, gw, cw) cells for reduction."""
    gh, gw = grid
    h, w = values.shape
    return values.reshape(gh, h // gh, gw, w // gw)


def _stat_pyramid_blocks(rgb: np.ndarray, spec: ModelSpec) -> list[FeatureBlock]:
    """Four blocks of pooled local statistics at doubling smoothing scales."""
    grids = spec.resolution.grids
    blocks = []
    for block_id, sigma in enumerate(_PYRAMID_SIGMAS):
        if sigma > 0:
            smooth = np.stack(
                [ndimage.gaussian_filter(rgb[:, :, c], sigma) for c in range(3)],
                axis=2,
            )
        else:
            smooth = rgb
        gray = (
            0.2126 * smooth[:, :, 0]
            + 0.7152 * smooth[:, :, 1]
            + 0.0722 * smooth[:, :, 2]
        )
        dy, dx = np.gradient(gray)
        lap = ndimage.laplace(gray)

        grid = grids[block_id]
        gh, gw = grid
        pooled = np.empty((gh, gw, _PYRAMID_CHANNELS), dtype=np.float64)
        for c in range(3):
            pooled[:, :, c] = _cell_pool(smooth[:, :, c], grid).mean(axis=(1, 3))
        gray_cells = _cell_pool(gray, grid)
        pooled[:, :, 3] = gray_cells.std(axis=(1, 3))
        pooled[:, :, 4] = _cell_pool(np.abs(dx), grid).mean(axis=(1, 3))
        pooled[:, :, 5] = _cell_pool(np.abs(dy), grid).mean(axis=(1, 3))
        pooled[:, :, 6] = _cell_pool(np.hypot(dx, dy), grid).mean(axis=(1, 3))
        pooled[:, :, 7] = _cell_pool(np.abs(lap), grid).mean(axis=(1, 3))
        cols = (np.arange(gw) + 0.5) / gw
        rows = (np.arange(gh) + 0.5) / gh
        pooled[:, :, 8] = cols[np.newaxis, :]
        pooled[:, :, 9] = rows[:, np.newaxis]
        pooled[:, :, 10] = _cell_pool(gray * gray, grid).mean(axis=(1, 3))
        pooled[:, :, 11] = gray_cells.max(axis=(1, 3)) - gray_cells.min(axis=(1, 3))
        blocks.append(FeatureBlock(block_id, pooled.astype(np.float32)))
    return blocks


_BUILTIN_BACKENDS = {
    "stat_pyramid": _stat_pyramid_blocks,
}


def _output_stem(image_path: Path) -> str:
    return image_path.stem


def extract_features(
    spec: ModelSpec,
    images: Sequence,
    out_dir,
    cache_dir=None,
) -> list[Path]:
    """Extract one feature file per image into ``out_dir``.

    Returns the written paths, one per input image in order.  Output files
    are named ``<image stem>.p3df``; running twice on the same inputs
    produces byte-identical files.
    """
    image_paths = [Path(p) for p in images]
    if not image_paths:
        raise ConfigError("no images to extract from")

    if spec.source is not None:
        cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        found = spec.source.resolve(cache, spec.model_id)
        raise DataError(
            f"found checkpoint for {spec.model_id!r} at {found}, but this "
            f"build bundles no neural runtime to execute it; the "
            f"self-contained models ({', '.join(builtin_models())}) run "
            f"everywhere, checkpoint-backed extraction needs the "
            f"integration environment"
        )

    backend = _BUILTIN_BACKENDS.get(spec.architecture)
    if backend is None:
        raise ConfigError(
            f"model {spec.model_id!r} declares no usable backend "
            f"({spec.architecture!r})"
        )

    stems = [_output_stem(p) for p in image_paths]
    seen: dict[str, Path] = {}
    for stem, path in zip(stems, image_paths):
        if stem in seen:
            raise ConfigError(
                f"two images would write the same output file {stem!r}: "
                f"{seen[stem]} and {path}"
            )
        seen[stem] = path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, path in zip(stems, image_paths):
        rgb = _resized_array(load_image(path), spec.resolution.input_size)
        blocks = backend(rgb, spec)
        target = out_dir / (stem + FEATURE_SUFFIX)
        write_feature_file(target, FeatureGrids(spec.model_id, tuple(blocks)))
        written.append(target)
    return written
