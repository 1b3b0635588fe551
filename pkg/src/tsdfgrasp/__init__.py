"""Volumetric grasp planning on synthetic clutter.

Depth frames of analytic primitive scenes are fused into truncated
signed-distance volumes; grasp poses are sampled from the isosurface,
matched into antipodal contact pairs, collision checked against the
volume, and ranked. Submodules: geom, scene, tsdf, isosurface, contact,
planner, dataset, harness, cli.
"""

__version__ = "0.1.0"
