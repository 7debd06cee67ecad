"""Reinforcement-learning evasion of static PE malware classifiers."""

__version__ = "0.1.0"
