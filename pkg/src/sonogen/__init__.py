"""sonogen: joint image+mask generation for ultrasound segmentation.

A compact, fully seeded toolkit: a class-conditional denoising diffusion model
over tri-channel (gray, gray, mask) images with optional low-rank adapter
fine-tuning, an ellipse extraction and human curation pipeline for generated
masks, a frozen-encoder promptable segmentor, and an experiment harness that
measures the downstream value of synthetic data on hybrid real+synthetic sets.
"""

__version__ = "0.1.0"
