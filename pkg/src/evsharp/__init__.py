"""Event-assisted deblurred radiance fields, desk scale.

Submodules
----------
geom      SE(3) poses, exp/log maps, trajectory interpolation, rays
autodiff  reverse-mode AD tape over dense float64 arrays
field     multiresolution feature grid + density/color MLPs + embeddings
render    quadrature volume rendering and the motion-blur compositor
event     sensor mapping, brightness increment images, event loss, simulator
sim       analytic scenes, oracle renderer, synthetic dataset generation
train     joint RGB+event optimization, pose refinement, global embedding fit
eval      PSNR/SSIM, test-pose alignment, Powell minimizer, scale recovery
io        file formats (PPM, poses, events, checkpoints, config), HDR->LDR
cli       command-line entry point

Kept import-light on purpose: `evsharp.cli` caps thread counts before the
numerical stack loads.
"""

__version__ = "0.1.0"
