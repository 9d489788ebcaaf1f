"""Latent-space generative modeling and optimization for typed DAGs.

Modules: ``autodiff`` (tape-based reverse mode), ``nn`` (learned layers),
``dag`` (graph values and I/O), ``encoder``/``decoder`` (message-passing
VAE halves), ``vae`` (training and metrics), ``scoring`` (oracles),
``gpbo`` (surrogate optimization), ``cli`` (command-line entry points).
"""

__version__ = "0.1.0"

from . import autodiff, dag, decoder, encoder, gpbo, nn, scoring, vae  # noqa: F401,E402
