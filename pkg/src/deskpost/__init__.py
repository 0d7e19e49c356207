"""Desk-scale post-training: SFT, on-policy distillation, GRPO with in-domain CE, agentic RFT."""

__version__ = "0.1.0"
