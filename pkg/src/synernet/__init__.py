"""Multi-agent adaptation of frozen dual encoders for out-of-distribution class names."""

__version__ = "0.1.0"
