"""Emotion-conditioned diffusion synthesis of co-speech gestures.

The package covers the full desk-scale pipeline: a float64 autodiff engine,
the gesture/audio data model, a seeded synthetic corpus, the denoising
diffusion machinery with inpainting-style editing, the joint/temporal
transformer denoiser with three emotion-conditioning mechanisms, training,
and the FGD / SRGR / BeatAlign evaluation suite.
"""

__version__ = "0.1.0"
