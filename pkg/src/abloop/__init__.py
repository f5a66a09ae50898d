"""abloop: desk-scale iterative antibody optimization with a
sequence-structure diffusion model.

Subpackage layout:

- ``structio``  structure ingestion, rigid frames, patches, superposition
- ``so3``       rotation algebra and isotropic Gaussians on SO(3)
- ``diffusion`` noise schedules, forward kernels, posteriors, losses
- ``denoiser``  the three-headed denoising network and its training loop
- ``synthetic`` procedural antibody-antigen complexes for desk-scale training
- ``sampler``   reverse-process generation and oracle-guided sampling
- ``oracles``   sequence scoring models and the simulated laboratory
- ``campaign``  the multi-round design loop and ablation runner
- ``cli``       command-line entry point
"""

__version__ = "0.1.0"
