"""Differentiable tree machine: trees as tensor product representations,
linear car/cdr/cons operators, and a transformer agent that learns to
sequence them."""

__version__ = "0.1.0"
