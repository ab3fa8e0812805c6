"""Learned cardinality estimation over star schemas with deletion
unlearning and a Q-error evaluation harness."""

__version__ = "0.1.0"
