"""Procedural sprite dataset: rendering, filtering, augmentation, storage."""
