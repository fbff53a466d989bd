"""Prediction-based safety filtering for a vehicle sharing the road with a
state-coupled pedestrian: simulation, learned prediction, conformal
calibration and a control-barrier-function filter."""

__version__ = "0.1.0"
