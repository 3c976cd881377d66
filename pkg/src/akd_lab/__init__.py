"""akd-lab - a desk-scale laboratory for adversarial knowledge distillation."""

__version__ = "0.1.0"
