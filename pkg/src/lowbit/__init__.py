"""Post-training quantization toolkit and quantized-transformer inference simulator.

Fine-grained uniform symmetric quantization (group-wise weights, token-wise
activations), static momentum calibration, integer GeMM with a fused
dequantization epilogue, and layer-by-layer distillation of quantized
transformer blocks, all exercised end-to-end on synthetic toy models.
"""

__version__ = "0.1.0"
