"""Sidecar tools for the dense-feature evaluation engine.

Three jobs, three command-line tools:

* ``p3d-extract`` — turn images into per-block feature-grid files using a
  registered model (:mod:`p3d_extractor.models`, :mod:`.features`),
* ``p3d-convert`` — turn exported dataset trees into evaluation manifests
  with depth/normal/mask map files (:mod:`p3d_extractor.convert`),
* ``p3d-plot`` — render the evaluation engine's report CSVs as figures
  (:mod:`p3d_extractor.plots`).

Everything is exchanged through documented file formats
(:mod:`p3d_extractor.formats`); this package never imports the evaluation
engine.
"""

__version__ = "0.1.0"
