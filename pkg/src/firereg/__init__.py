"""Unsupervised bi-directional synthesis + registration (FIRE-style) on numpy."""
