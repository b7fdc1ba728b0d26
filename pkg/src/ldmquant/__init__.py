"""Post-training quantization analysis for toy diffusion UNets.

Builds seeded UNet-shaped module graphs, fake-quantizes them, measures relative
quantization noise (SQNR) per module and at the sampler output, and derives
hybrid precision plans, smoothing selections and BOPs/size accounting.
"""

__version__ = "0.1.0"
