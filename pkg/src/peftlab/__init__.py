"""From-scratch parameter-efficient fine-tuning stack for instruction-tuned text classification."""

__version__ = "0.1.0"
