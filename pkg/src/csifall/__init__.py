"""WiFi CSI fall detection with a dynamic variance gate and an attention-enhanced CNN-Transformer."""

__version__ = "0.1.0"
