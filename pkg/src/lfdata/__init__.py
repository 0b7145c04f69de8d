"""Trace-driven simulation of facility data delivery and knowledge-graph data discovery."""

__version__ = "0.1.0"
