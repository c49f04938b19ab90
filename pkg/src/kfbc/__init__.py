"""Keyframe-focused behavioral cloning toolkit.

Trains an action-history ("copycat") predictor on demonstration data, scores
every frame by the predictor's error, and upweights the high-error changepoint
frames in the behavioral cloning loss. Ships with the ToyCar sandbox, the
usual baselines (single-observation BC, history BC, history dropout, DAGGER),
alternative weighting schemes, and rollout diagnostics.
"""

__version__ = "0.1.0"
