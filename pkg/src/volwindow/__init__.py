"""Sliding-window volumetric lesion segmentation toolkit."""

from .volgrid import MaskVolume, Volume, read_nifti, voxel_volume_ml, write_nifti

__all__ = ["MaskVolume", "Volume", "read_nifti", "voxel_volume_ml", "write_nifti"]
__version__ = "0.1.0"
