"""Dense traffic-video captioning toolkit.

Synthetic scenarios, crop/trim geometry, time-token sequence codec, a
conditional encoder-decoder captioner, dual-target training and caption
metrics.
"""

__version__ = "0.1.0"
