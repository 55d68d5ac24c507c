"""Operational surface: synthetic scenes, network assembly, training,
evaluation runs, ablations, checkpoints and the command line."""
