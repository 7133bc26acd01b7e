"""Multi-proposal keypoint consensus, part boxes and evaluation metrics."""
