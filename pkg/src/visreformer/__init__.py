"""Vision Reformer: patch tokenization, LSH bucketed attention and reversible
blocks, with a capacity-matched dense-attention ViT baseline."""

__version__ = "0.1.0"
