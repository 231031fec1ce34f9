"""Map-tracking localization: keypoint-to-landmark matching under a pose prior,
a two-pose information filter, multi-session landmark maps and a synthetic
benchmark harness."""

from .dataset import FrameBundle, Session, load_session, save_session
from .estimator import FilterState, OdometryMeasurement, RobustLossConfig, SolverConfig, propagate, update
from .features import KeypointSet, hamming, median_descriptor
from .geometry import CameraModel, Pose
from .landmark_map import LandmarkMap, Observation, load_map, save_map
from .localization import LocalizerConfig, NoFixError, RunLog, bootstrap, global_localize, run_sequence
from .mapping import BootstrapFailure, MappingConfig, add_session, build_base_map
from .metrics import accuracy, recall
from .tracking import LocalizationConstraint, TrackingConfig, match_frame

__version__ = "0.1.0"

__all__ = [
    "FrameBundle", "Session", "load_session", "save_session",
    "FilterState", "OdometryMeasurement", "RobustLossConfig", "SolverConfig", "propagate", "update",
    "KeypointSet", "hamming", "median_descriptor",
    "CameraModel", "Pose",
    "LandmarkMap", "Observation", "load_map", "save_map",
    "LocalizerConfig", "NoFixError", "RunLog", "bootstrap", "global_localize", "run_sequence",
    "BootstrapFailure", "MappingConfig", "add_session", "build_base_map",
    "accuracy", "recall",
    "LocalizationConstraint", "TrackingConfig", "match_frame",
]
