"""File-level objects: checkpoints and result tables."""
