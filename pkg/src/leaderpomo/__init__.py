"""Leader Reward for POMO-style neural routing solvers (TSP, CVRP)."""

__version__ = "0.1.0"
