"""Zero-shot correspondence recall as features degrade.

Builds exact two-view stereo fixtures across the full range of viewpoint
separations, then matches feature grids of decreasing quality: the clean
positional encoding matches perfectly at every angle, and each added dose
of noise pulls recall further down — with the per-bin breakdown showing
exactly where matching breaks.

Run:  python3 demos/correspondence_recall.py
"""

import numpy as np

from p3d import matching as mt
from p3d import synthetic as syn
from p3d.matching import FeatureGrid


def noisy_grid(grid: FeatureGrid, sigma: float, rng) -> FeatureGrid:
    values = np.asarray(grid.values, dtype=np.float64)
    return FeatureGrid(values + rng.normal(scale=sigma, size=values.shape),
                       model_id=f"noise{sigma:g}", block_id=grid.block_id,
                       image_size=grid.image_size)


def recall_by_bin(pairs, sigma: float) -> list[float]:
    rng = np.random.default_rng(7)
    edges = mt.DEFAULT_SCENE_EDGES
    binning = mt.bin_pairs([p.angle_deg for p in pairs], edges=edges)
    per_pair = []
    for pair in pairs:
        grid_a = noisy_grid(pair.grid_a, sigma, rng) if sigma else pair.grid_a
        grid_b = noisy_grid(pair.grid_b, sigma, rng) if sigma else pair.grid_b
        matches = mt.top_k(mt.dense_nn_matches(grid_a, grid_b), k=12)
        res = mt.geometric_recall(matches, grid_a, grid_b, pair.frame_a,
                                  pair.frame_b, mode="proj2d", threshold=0.5)
        per_pair.append(res.recall)
    return [float(np.mean([per_pair[i] for i in binning.indices_in(b)]))
            for b in range(len(binning.labels()))]


def main():
    pairs = syn.make_binned_stereo_pairs(mt.DEFAULT_SCENE_EDGES, pairs_per_bin=4,
                                         n_pixels=16)
    labels = mt.bin_pairs([p.angle_deg for p in pairs],
                          edges=mt.DEFAULT_SCENE_EDGES).labels()
    print(f"{len(pairs)} stereo pairs, recall within 0.5 px by viewpoint bin:\n")
    print("  noise   " + "".join(f"{label:>10}" for label in labels))
    for sigma in (0.0, 0.02, 0.05, 0.2):
        recalls = recall_by_bin(pairs, sigma)
        print(f"  {sigma:<8g}" + "".join(f"{r:10.2f}" for r in recalls))
    print("\nclean features stay at 1.00 in every bin; each dose of feature"
          " noise pulls recall further down")


if __name__ == "__main__":
    main()
