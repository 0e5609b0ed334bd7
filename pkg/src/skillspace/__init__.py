"""Planar biped whole-body control stack: simulator, RL engine, primitive
skills, CVAE skill ensembling, latent-space planners, and the teleop service."""

__version__ = "0.1.0"
