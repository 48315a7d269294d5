"""Counterfactual reasoning for POMDPs: exact SCM inference, off-policy
evaluation and return-weighted policy search."""

__version__ = "0.1.0"
