"""solidmark: per-image memorization auditing for diffusion models.

Each training image gets a random grayscale key painted into a border; a
model that has memorized the image can outpaint the border back to within a
small distance of its key.
"""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
