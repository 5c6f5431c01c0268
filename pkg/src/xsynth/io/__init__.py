"""File formats (NIfTI-1, XMOD checkpoints, XFEA features) and data sources."""
