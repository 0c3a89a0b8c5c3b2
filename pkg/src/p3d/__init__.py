"""p3d: measuring how well frozen visual features capture 3-D structure.

The package trains small dense probes (depth, surface normals) on top of
precomputed feature grids, scores zero-shot correspondence (geometric and
semantic), and aggregates the results into cross-task correlations and
rank-based ratings.  Everything is numpy-based and deterministic given a
seed.
"""

__version__ = "0.1.0"
