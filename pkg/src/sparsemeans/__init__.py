"""Two-sample tests for high-dimensional means with thresholding and data transformation."""
