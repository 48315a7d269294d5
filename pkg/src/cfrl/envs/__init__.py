from .twodoor import follow_hint_policy, two_door, uniform_policy

__all__ = ["two_door", "follow_hint_policy", "uniform_policy"]
