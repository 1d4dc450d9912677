"""Hardware-aware architecture search for on-device speaker-count
estimation: a weight-sharing supernet of 1D-conv classifiers trained with
uncertainty-gated distillation, searched under latency/energy budgets from
a table-driven cost model."""

__version__ = "0.1.0"
