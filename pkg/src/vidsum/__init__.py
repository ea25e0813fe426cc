"""vidsum: desk-scale video summarization toolkit.

Pipeline: frame features -> shot segmentation -> sparse-attention
encoder/decoder scoring -> budgeted key-shot selection -> F-measure
evaluation. Everything is seeded and bitwise reproducible.
"""

__version__ = "0.1.0"
