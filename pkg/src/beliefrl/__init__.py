"""Belief-state recurrent actor-critic policies on a hidden-noise stop-or-guess task."""

__version__ = "0.1.0"
