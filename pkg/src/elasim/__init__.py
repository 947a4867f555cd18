"""Embodied laser attack simulator: scenes, perception, laser compositing, classifiers and a PPO agent."""

__version__ = "0.1.0"
