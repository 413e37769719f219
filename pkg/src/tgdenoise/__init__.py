"""Target-guided score-based denoising for extreme low-SNR micrographs.

Library layout:

- :mod:`tgdenoise.mrc_io` -- MRC2014 reading/writing, patch tiling, blended stitching
- :mod:`tgdenoise.noise_model` -- forward corruption models and analytic conditional score
- :mod:`tgdenoise.target_bank` -- projection bank, feature subspace, similarity matching
- :mod:`tgdenoise.score_model` -- preconditioned convolutional score network
- :mod:`tgdenoise.objectives` -- score-matching losses and analytic verification checks
- :mod:`tgdenoise.trainer` -- schedules and the training loop
- :mod:`tgdenoise.denoiser` -- iterative score-field inference on patches and micrographs
- :mod:`tgdenoise.phantom` -- synthetic ground-truth generation
- :mod:`tgdenoise.evaluation` -- particle matching metrics and Fourier shell correlation
- :mod:`tgdenoise.cli` -- command-line entry points
"""

__version__ = "0.1.0"
