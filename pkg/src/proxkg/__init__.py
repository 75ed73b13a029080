"""Knowledge graph embedding with a derived proximity graph and a chained GNN encoder."""

__version__ = "0.1.0"
