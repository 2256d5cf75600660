"""Multi-view 6DoF object pose refinement through a differentiable NOCS renderer.

Modules:

- :mod:`mvrefine.geom`: rigid transforms, 6D rotations, cameras, NOCS maps
- :mod:`mvrefine.mesh`: meshes, file I/O, decimation
- :mod:`mvrefine.render`: hard z-buffer and soft (differentiable) rendering
- :mod:`mvrefine.pnp`: dense correspondences, EPnP and RANSAC initialization
- :mod:`mvrefine.refine`: reference selection and joint multi-view refinement
- :mod:`mvrefine.synth`: synthetic scenes, prediction noise, scene bundles
- :mod:`mvrefine.metrics`, :mod:`mvrefine.experiment`: ADD/ADD-S and trend studies
- :mod:`mvrefine.cli`: the ``mvrefine`` command
"""

__version__ = "0.1.0"
