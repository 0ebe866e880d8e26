"""Long-horizon planning by stitching replay-buffer segments retrieved with a learned reachability metric."""

__version__ = "0.1.0"
