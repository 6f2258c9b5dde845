"""Unified Attention-Mamba (UAM) backbone for cell-level radiomics
classification: a from-scratch float64 autodiff engine, the Amamba and
Amamba-MoE encoders with ablation baselines, a multimodal radiomics+image
fusion path, and a training/evaluation CLI."""

__version__ = "0.1.0"
