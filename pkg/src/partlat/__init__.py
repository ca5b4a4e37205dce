"""partlat: local latent representations for particle simulation data.

Pipeline pieces, roughly in the order a session uses them:

- :mod:`partlat.frames` -- frame loading, normalization, spatial queries,
  value-based sampling.
- :mod:`partlat.bandwidth` -- data-driven kernel radius selection via
  leave-one-out cross-validation and golden-section search.
- :mod:`partlat.geoconv` / :mod:`partlat.model` / :mod:`partlat.train` --
  the direction-aware convolutional autoencoder that maps each particle's
  neighborhood to a compact latent vector.
- :mod:`partlat.analysis` / :mod:`partlat.tsne` -- clustering and 2-D
  embedding of latent vectors.
- :mod:`partlat.tracking` -- histogram-based mean-shift tracking of a
  selected particle region through time.
- :mod:`partlat.service` / :mod:`partlat.cli` -- HTTP session service and
  command-line front end.
"""

__version__ = "0.1.0"
