"""Multi-robot trajectory, IMU and feature-measurement synthesis."""

from .config import SimConfig
from .rng import stream
from .trajectory import TrajectorySpline, build_trajectories, figure_eight, load_tum, sample_imu
from .world import FrameObservations, RunData, SimWorld, generate_run

__all__ = ["SimConfig", "stream", "TrajectorySpline", "build_trajectories", "figure_eight", "load_tum",
           "sample_imu", "FrameObservations", "RunData", "SimWorld", "generate_run"]
