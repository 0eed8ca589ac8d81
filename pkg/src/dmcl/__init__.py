"""Zero-shot domain adaptation with dual mixup and dual-level contrastive learning."""

__version__ = "0.1.0"
