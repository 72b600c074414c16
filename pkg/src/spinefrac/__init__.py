"""Vertebral fracture detection from 3D volumes: voxel classification with a
dual-pathway 3D CNN, then patient- and vertebra-level aggregation."""

__version__ = "0.1.0"
