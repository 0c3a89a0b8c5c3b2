"""Command-line entry points: ``p3d-extract``, ``p3d-convert``, ``p3d-plot``.

All three share one error protocol: argument problems exit 2, bad or missing
data exits 3, unexpected internal failures exit 4, and success exits 0.
Error text goes to stderr prefixed with ``error:``.
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

from . import convert, features, models, plots
from .errors import ConfigError, DataError, ExtractorError
from .formats import read_manifest_document, write_manifest_document

_SAFE_ITEM_ID = re.compile(r"[A-Za-z0-9._-]+")

# Manifest keys holding paths that must survive relocation of the manifest.
_PATH_KEYS = ("image", "depth_map", "normal_map", "valid_mask",
              "object_mask", "features")


def _run(command, argv) -> int:
    try:
        return command(argv)
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: internal failure: {exc}", file=sys.stderr)
        return 4


# ---------------------------------------------------------------------------
# p3d-extract


def _extract_command(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="p3d-extract",
        description="Extract per-block feature grids from images.")
    parser.add_argument("--model", help="model id (see --list-models)")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--images", type=Path, nargs="+",
                        help="image files to extract from")
    parser.add_argument("--manifest", type=Path,
                        help="dataset manifest; extracts every item's image "
                             "and writes an augmented manifest")
    parser.add_argument("--cache-dir", dest="cache_dir", type=Path,
                        help="checkpoint cache directory")
    parser.add_argument("--list-models", dest="list_models",
                        action="store_true",
                        help="list available models and exit")
    args = parser.parse_args(argv)

    if args.list_models:
        for model_id in models.list_models():
            spec = models.get_model(model_id)
            needs = "built-in" if spec.source is None else "checkpoint"
            print(f"{spec.model_id:20s} {spec.family:16s} "
                  f"{spec.architecture:16s} {needs}")
        return 0

    if not args.model:
        raise ConfigError("--model is required (or use --list-models)")
    if args.out is None:
        raise ConfigError("--out is required")
    if (args.images is None) == (args.manifest is None):
        raise ConfigError("exactly one of --images or --manifest "
                          "is required")

    spec = models.get_model(args.model)
    if args.images is not None:
        written = features.extract_features(spec, args.images, args.out,
                                            cache_dir=args.cache_dir)
        print(f"wrote {len(written)} feature file(s) to {args.out}")
        return 0
    return _extract_manifest(spec, args.manifest, args.out, args.cache_dir)


def _extract_manifest(spec, manifest_path: Path, out_dir: Path,
                      cache_dir) -> int:
    document = read_manifest_document(manifest_path)
    root = manifest_path.resolve().parent
    out_dir = Path(out_dir)

    items = document["items"]
    for item in items:
        if not isinstance(item, dict) or not isinstance(item.get("id"), str):
            raise DataError(f"{manifest_path.name}: every item needs a "
                            "string 'id'")
        item_id = item["id"]
        if not _SAFE_ITEM_ID.fullmatch(item_id):
            raise DataError(f"item id {item_id!r} is not a safe file name")
        if not isinstance(item.get("image"), str):
            raise DataError(f"item {item_id!r} has no 'image' path to "
                            "extract from")

    count = 0
    for item in items:
        item_id = item["id"]
        image = Path(item["image"])
        if not image.is_absolute():
            image = root / image
        if not image.is_file():
            raise DataError(f"item {item_id!r}: image not found: {image}")
        (written,) = features.extract_features(spec, [image], out_dir,
                                               cache_dir=cache_dir)
        target = out_dir / f"{item_id}{features.FEATURE_SUFFIX}"
        if written != target:
            written.replace(target)
        count += 1

        item["features"] = target.name
        for key in _PATH_KEYS:
            if key == "features":
                continue
            value = item.get(key)
            if isinstance(value, str) and not Path(value).is_absolute():
                item[key] = str((root / value).resolve())

    write_manifest_document(out_dir / "manifest.json", document)
    print(f"wrote {count} feature file(s) and manifest.json to {out_dir}")
    return 0


def main_extract(argv=None) -> int:
    return _run(_extract_command, argv)


# ---------------------------------------------------------------------------
# p3d-convert


def _convert_command(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="p3d-convert",
        description="Convert a published dataset tree to a manifest with "
                    "dense maps.")
    parser.add_argument("--kind", required=True,
                        choices=sorted(convert.DATASET_KINDS))
    parser.add_argument("--src", type=Path, required=True,
                        help="dataset source directory")
    parser.add_argument("--out", type=Path, required=True,
                        help="output directory")
    parser.add_argument("--seed", type=int, default=0,
                        help="sampling seed (default 0)")
    parser.add_argument("--pairs-per-class", dest="pairs_per_class",
                        type=int, default=convert.DEFAULT_PAIRS_PER_CLASS,
                        help="keypoint pairs sampled per class "
                             f"(default {convert.DEFAULT_PAIRS_PER_CLASS})")
    args = parser.parse_args(argv)

    summary = convert.convert_dataset(args.kind, args.src, args.out,
                                      seed=args.seed,
                                      pairs_per_class=args.pairs_per_class)
    print(f"converted {summary.kind}: {summary.items} item(s), "
          f"{summary.pairs} pair(s), "
          f"{summary.keypoint_pairs} keypoint pair(s)")
    if summary.excluded:
        print(f"excluded objects: {', '.join(summary.excluded)}")
    print(f"manifest: {summary.manifest}")
    return 0


def main_convert(argv=None) -> int:
    return _run(_convert_command, argv)


# ---------------------------------------------------------------------------
# p3d-plot


def _plot_command(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="p3d-plot",
        description="Render evaluation CSVs to PNG figures.")
    parser.add_argument("csvs", type=Path, nargs="+",
                        help="CSV files produced by the evaluation engine")
    parser.add_argument("--out", type=Path, required=True,
                        help="directory for the figures")
    args = parser.parse_args(argv)

    records = plots.plot_report(args.csvs, args.out)
    for record in records:
        print(f"{record.figure.name}: {record.kind} "
              f"from {record.source.name}")
    return 0


def main_plot(argv=None) -> int:
    return _run(_plot_command, argv)
