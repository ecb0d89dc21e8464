"""Skelebones: compress 4D vertex sequences into bones + skeleton rigs and reanimate them."""

__version__ = "0.1.0"
