"""int8 attention kernels, tiling planner and simulated executor."""

__version__ = "0.1.0"
