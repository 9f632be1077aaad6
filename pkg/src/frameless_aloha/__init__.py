"""Frameless slotted ALOHA with joint ML user-count estimation and SIC peeling."""

__version__ = "0.1.0"
