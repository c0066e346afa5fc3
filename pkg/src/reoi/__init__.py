"""Reimagine and reinsert novel distractors for world-model based planning.

Modules:

``sim``          2-D pick-and-place simulator and scripted policy
``wm``           patch-latent world model (encoder, dynamics, decoder)
``distractor``   segmentation, persistence-based identification, inpainting
``composite``    depth-ordered layer compositing and reinsertion
``mpc``          candidate sampling, verification and selection
``trustregion``  Lipschitz trust region over (latent, plan) inputs
``metrics``      SSIM and the evaluation protocols
``io``           binary file formats, hashing, pixmap export
``cli``          command-line harness
"""

__version__ = "0.1.0"
