"""voiceface: predict facial anthropometric measurements from voice, test which
are statistically predictable, and reconstruct 3D facial shapes from them.

The package is a plain numpy/scipy library.  Submodules:

- ``geometry``       meshes, landmarks, measurement math and gradients
- ``shapespace``     eigenface basis built with the Gram-matrix trick
- ``features``       log-mel spectrograms and segmentation
- ``estimator``      voice-code encoder with per-measurement mean/variance heads
- ``phonatory``      diffusion-based auxiliary training constraint
- ``stats``          chance baselines, error ratios, one-sided t-test harness
- ``reconstruction`` measurement-guided eigenface fitting
- ``synthdata``      synthetic paired datasets with planted correlations
- ``cli``            pipeline stages (``voiceface <stage> ...``)
"""

__version__ = "0.1.0"
