"""Graph-based cooperative intersection management: a traffic simulator with baseline controllers and an edge-feature GNN planner."""

__version__ = "0.1.0"
