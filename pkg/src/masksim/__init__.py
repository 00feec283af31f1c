"""Action-steerable video dynamics models over synthetic embodiments."""

__version__ = "0.1.0"
