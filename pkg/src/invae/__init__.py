"""invae: multi-domain causal representation learning under weak
distributional invariances.

Submodules: ``latentgen`` (multi-domain latent samplers), ``mixing``
(polynomial mixing maps), ``numcore`` (autodiff tape + optimizer),
``models`` (autoencoder architectures), ``invariance`` (support / MMD
penalties), ``trainer`` (two-stage training), ``evaluation``
(block-identification metrics), ``theory`` (bound calculators and
verifiers), ``data`` (dataset IO), ``experiments`` (pipelines), ``cli``.
"""

__version__ = "0.1.0"
