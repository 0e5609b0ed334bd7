"""Operational shell: experiment configs, the command-line entry points,
and the teleoperation service that bridges the simulator and the ensembled
policy to a browser console."""
