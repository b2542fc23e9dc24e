"""Digital-twin platform and deep-RL harness for smart-home heating."""

__version__ = "0.1.0"
