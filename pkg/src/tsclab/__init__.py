"""Traffic-signal-control research stack: simulator, state encodings, controllers, NAPO trainer."""

__version__ = "0.1.0"
