"""Sparse model inversion for small vision transformers.

Dense and attention-guided sparse inversion of training-like images from
a frozen classifier, plus data-free quantization and knowledge transfer
built on the inverted images. Pure numpy/scipy, float64 throughout.
"""

__version__ = "0.1.0"
