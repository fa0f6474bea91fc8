"""Closed-loop workbench for point-cloud fabrication attacks on
collaborative perception, plus an occupancy-map cross-check defense.

Everything runs on a small synthetic world: a planar road, cuboid
vehicles, a ring/azimuth LiDAR model, and deliberately simple stand-in
detectors whose scores are differentiable by hand.
"""

__version__ = "0.1.0"
