"""Content-based song retrieval and audience targeting for cold-start releases."""

__version__ = "0.1.0"
