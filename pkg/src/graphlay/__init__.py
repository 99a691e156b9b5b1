"""graphlay: article knowledge graphs for lay summarisation.

Builds article-specific heterogeneous knowledge graphs from a concept
lexicon, injects them into a small gradient-verified encoder-decoder through
three mechanisms (decoder graph cross-attention, document embedding
enhancement, input text augmentation), and evaluates outputs with relevance
and readability metrics, significance tests, and a human-judgment workflow.
"""

__version__ = "0.1.0"
