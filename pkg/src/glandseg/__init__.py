"""Gland instance segmentation in H&E histology: stain-normalized
preprocessing, two CNN pixel classifiers (gland objects and gland
separators) and weighted total-variation refinement."""

__version__ = "0.1.0"
