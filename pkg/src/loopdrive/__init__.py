"""Closed-loop imitation learning for urban driving on a differentiable
log-replay simulator."""

__version__ = "0.1.0"
