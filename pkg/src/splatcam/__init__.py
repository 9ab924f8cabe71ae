"""Differentiable Gaussian splatting on the CPU with pinhole, equidistant
fisheye and equirectangular panorama cameras."""

from .cameras import Camera, CameraModel
from .model import Gaussian3D, ImageBuffer, Scene
from .splatting import render

__all__ = ["Camera", "CameraModel", "Gaussian3D", "ImageBuffer", "Scene", "render"]
__version__ = "0.1.0"
