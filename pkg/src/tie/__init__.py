"""Desk-scale text-conditioned image encoder and supporting VLM plumbing."""

__version__ = "0.1.0"
