"""Incremental model updating with a sequential meta generator.

Library layout:

- :mod:`asmg.autodiff` — tape-based reverse-mode differentiation (float64).
- :mod:`asmg.datastream` — interaction log ingestion, period splitting,
  user sequences, negative sampling, period shards.
- :mod:`asmg.base_model` — the Embedding&MLP click-prediction model and its
  per-period incremental training.
- :mod:`asmg.metagen` — the grouped recurrent parameter generator and the
  linear-combination generator.
- :mod:`asmg.trainer` — warm-up and online generate/serve/update loops,
  meta objectives, baselines.
- :mod:`asmg.metrics` — AUC / LogLoss and run aggregation.
- :mod:`asmg.synthetic` — synthetic drifting interaction stream generator.
- :mod:`asmg.experiment`, :mod:`asmg.cli` — experiment lifecycle and the
  command-line front end.
"""

__version__ = "0.1.0"
