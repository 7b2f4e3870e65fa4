"""DA-SPL: dual-attention, parallel-LSTM glaucoma report generation on a numpy autodiff core."""

__version__ = "0.1.0"
