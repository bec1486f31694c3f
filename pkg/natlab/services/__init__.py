"""
natlab services: autodiff, model, losses, training, decoding and evaluation.
"""
