"""Desk-scale continuous speech separation with SSL-embedding fusion."""

__version__ = "0.1.0"
