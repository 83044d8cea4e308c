"""PVC beat detection with a densely connected 1-D CNN and pyramid pooling."""

__version__ = "0.1.0"
