"""Relaxed-mask training with concave sparsity penalties for finding sparse trainable subnetworks."""

__version__ = "0.1.0"
