"""Gradient-free adversarial purification toolkit.

Pipeline: anti-aliasing filter -> RGB quantization -> residual-shifting
diffusion super-resolution -> resize for the classifier. Includes a desk-scale
attack harness (FGSM / PGD / EOT / BPDA), a contrastive deblurring fine-tuning
loop, and numerical checks of the KL-ordering argument behind full-process
purification.
"""

__version__ = "0.1.0"
