"""Multi-robot area search: gridworld simulator, hierarchical PPO trainer and benchmarks."""

__version__ = "0.1.0"
