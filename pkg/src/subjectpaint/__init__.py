"""Subject-preserving scene generation: a layout diffusion model proposes boxes around a
given subject, the subject is rescaled and pasted into its box, and an adapter-equipped
diffusion UNet paints the rest of the scene."""

__version__ = "0.1.0"
