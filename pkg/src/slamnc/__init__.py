"""Magnetic-field SLAM with simultaneous magnetometer bias calibration.

A Rao-Blackwellized particle filter in which every particle carries its own
field map and a Kalman filter over the constant magnetometer bias.
"""

__version__ = "0.1.0"

from .bias_kf import BiasKf, KfConfig, kf_new, kf_update
from .evaluation import CompassReport, NneConfig, compass_headings, nne, sphere_fit
from .frames import Pose2, Rotation3, planar_rotation_from_gravity, sensor_to_world, wrap_angle
from .likelihood import FloorPlan, LikelihoodConfig, floorplan_likelihood, mf_likelihood
from .mfmap import DataPoint, MfMap, Neighborhood, map_estimate_sensor, map_estimate_world
from .rbpf import MotionInput, MotionNoise, ParticleSet, predict, resample_if_needed, systematic_resample, weight_update
from .slam import RawSample, SlamncConfig, SlamState, StepInput, downsample, run, step

__all__ = [
    "BiasKf", "CompassReport", "DataPoint", "FloorPlan", "KfConfig", "LikelihoodConfig", "MfMap",
    "MotionInput", "MotionNoise", "Neighborhood", "NneConfig", "ParticleSet", "Pose2", "RawSample",
    "Rotation3", "SlamState", "SlamncConfig", "StepInput", "compass_headings", "downsample",
    "floorplan_likelihood", "kf_new", "kf_update", "map_estimate_sensor", "map_estimate_world",
    "mf_likelihood", "nne", "planar_rotation_from_gravity", "predict", "resample_if_needed", "run",
    "sensor_to_world", "sphere_fit", "systematic_resample", "weight_update", "wrap_angle",
]
