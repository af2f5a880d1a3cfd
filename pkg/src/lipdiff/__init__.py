"""Audio-conditioned diffusion inpainting for re-synchronizing lip motion in video."""

__version__ = "0.1.0"
