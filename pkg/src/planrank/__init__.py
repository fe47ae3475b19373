"""Rank candidate query plans produced under optimizer hint sets.

Parse EXPLAIN plan trees, score them with a tree-convolution network
trained by pairwise or listwise learning-to-rank (or a regression
baseline), and recommend the top hint set per query.
"""

__version__ = "0.1.0"
