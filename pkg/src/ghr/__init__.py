"""Hierarchical recurrent message passing on graphs, with a shortest-path harness."""

__version__ = "0.1.0"
