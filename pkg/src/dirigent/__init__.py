"""Diffusion model mapping an RGB image of a pose to robot joint values."""

from .kinematics import (EndEffectorPose, JointConfiguration, KinematicChain, Robot, forward_kinematics, jacobian,
                         load_chain, load_robot, parse_chain)
from .model import DirigentModel
from .network import Dirigent, NetworkConfig
from .schedule import NoiseSchedule, add_noise, build_cosine_schedule, denoise_step

__all__ = [
    "Dirigent",
    "DirigentModel",
    "EndEffectorPose",
    "JointConfiguration",
    "KinematicChain",
    "NetworkConfig",
    "NoiseSchedule",
    "Robot",
    "add_noise",
    "build_cosine_schedule",
    "denoise_step",
    "forward_kinematics",
    "jacobian",
    "load_chain",
    "load_robot",
    "parse_chain",
]

__version__ = "0.1.0"
