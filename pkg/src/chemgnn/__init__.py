"""Relation-specialised message-passing networks for potential-energy estimation."""

__version__ = "0.1.0"
