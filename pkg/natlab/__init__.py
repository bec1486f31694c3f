"""
natlab: a desk-scale non-autoregressive translation laboratory.

Conditional masked language model training with shared-mask and
average-model consistency regularization, plus mask-predict decoding.
"""
__version__ = "0.1.0"
