"""Low-rank matrix estimation with block-inhomogeneous noise."""
