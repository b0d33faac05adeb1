"""Command-line surface of the seasonal contrastive pipeline."""
