"""The whole pipeline through the command line, comparing three "models".

Writes stereo fixtures for a clean positional feature model and two noisy
copies, runs ``corr-eval`` on each, then feeds all three reports to
``analyze``: the ratings table ranks the models by feature quality and the
correlation matrix shows how consistently the narrow- and wide-baseline
bins move together across models.

Run:  python3 demos/full_pipeline.py
"""

import dataclasses
import json
import tempfile
from pathlib import Path

import numpy as np

from p3d import cli
from p3d import matching as mt
from p3d import synthetic as syn
from p3d.matching import FeatureGrid


def noisy_pairs(pairs, sigma: float, seed: int = 0):
    rng = np.random.default_rng(seed)
    out = []
    for pair in pairs:
        def jitter(grid: FeatureGrid) -> FeatureGrid:
            values = np.asarray(grid.values, dtype=np.float64)
            return FeatureGrid(values + rng.normal(scale=sigma, size=values.shape),
                               model_id=grid.model_id, block_id=grid.block_id,
                               image_size=grid.image_size)

        out.append(dataclasses.replace(pair, grid_a=jitter(pair.grid_a),
                                       grid_b=jitter(pair.grid_b)))
    return out


def show(path: Path, title: str) -> None:
    print(f"\n--- {title} ({path.name}) ---")
    print(path.read_text().strip())


def main():
    pairs = syn.make_binned_stereo_pairs(mt.DEFAULT_SCENE_EDGES, pairs_per_bin=3,
                                         n_pixels=12)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        reports = []
        for model_id, sigma in (("crisp", 0.0), ("hazy", 0.05), ("fuzzy", 0.2)):
            model_pairs = noisy_pairs(pairs, sigma) if sigma else pairs
            data_dir = root / f"data_{model_id}"
            syn.write_stereo_fixture(data_dir, model_pairs, model_id=model_id)
            out_dir = root / f"eval_{model_id}"
            code = cli.main(["corr-eval", "--manifest", str(data_dir / "manifest.json"),
                             "--out", str(out_dir), "--threshold", "0.5",
                             "--blocks", "0"])
            assert code == 0, f"corr-eval failed for {model_id}"
            reports.append(out_dir / "report.csv")
            show(out_dir / "recall.csv", f"recall per viewpoint bin: {model_id}")

        analysis_dir = root / "analysis"
        config = {
            "reports": [str(p) for p in reports],
            "out": str(analysis_dir),
            "tasks": [
                {"name": "narrow", "task_id": "correspondence",
                 "metric": "recall", "bin_id": "0-15"},
                {"name": "wide", "task_id": "correspondence",
                 "metric": "recall", "bin_id": "60-180"},
            ],
        }
        config_path = root / "analyze.json"
        config_path.write_text(json.dumps(config, indent=2))
        code = cli.main(["analyze", "--config", str(config_path)])
        assert code == 0, "analyze failed"
        show(analysis_dir / "ratings.csv", "model ratings")
        show(analysis_dir / "correlation.csv", "cross-task correlation")


if __name__ == "__main__":
    main()
