"""Funniness regression for micro-edited news headlines.

Two feature branches feed a shared prediction head: weighted pairwise
fusion of encoder hidden layers into a Bi-GRU, and a concatenated
word-vector matrix into a Bi-GRU plus a multi-kernel convolution bank.
All tensor math runs on the package's own reverse-mode autodiff core.
"""

__version__ = "0.1.0"
