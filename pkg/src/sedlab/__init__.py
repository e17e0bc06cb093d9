"""Semi-supervised sound event detection on synthetic soundscapes: data, CRNN, mean-teacher training, scoring."""

__version__ = "0.1.0"
