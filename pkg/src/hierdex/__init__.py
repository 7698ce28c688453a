"""Hierarchical bimanual manipulation stack: wrist planner, RL finger controller,
kinematic simulator, augmentation loop, distillation, and evaluation harness."""

__version__ = "0.1.0"
