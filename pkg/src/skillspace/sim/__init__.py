from .robot import RobotModel, RobotState, SceneSpec, SimConfig, load_robot
from .engine import BatchSim, Sim, SimulationDiverged, forward_kinematics

__all__ = [
    "RobotModel",
    "RobotState",
    "SceneSpec",
    "SimConfig",
    "load_robot",
    "BatchSim",
    "Sim",
    "SimulationDiverged",
    "forward_kinematics",
]
