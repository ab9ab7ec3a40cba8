"""Supervised multi-head CNN baselines for road-attribute coding."""
