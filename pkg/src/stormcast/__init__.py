"""Satellite infrared nowcasting: diffusion-refined recurrent prediction, detection, and baselines."""

__version__ = "0.1.0"
