"""Desk-scale global precipitation nowcasting."""

__version__ = "0.1.0"
