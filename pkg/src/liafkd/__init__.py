"""Learnable instance-attention filtering for detector feature distillation."""
