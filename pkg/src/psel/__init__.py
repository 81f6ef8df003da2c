"""Per-instance solver selection for TSP/CVRP over a zoo of heuristics."""

__version__ = "0.1.0"
