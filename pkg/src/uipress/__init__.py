"""Element-guided visual token compression for screenshot-to-markup decoding, at toy scale."""

__version__ = "0.1.0"
