"""Batch analysis of prompt-optimization edit trajectories.

Ingests JSONL comparison logs of consecutive prompt revisions, extracts
surface features and inserted edit motifs, and estimates per-feature,
per-task-group associations between edits and performance gains with
stabilized inverse-probability weighting, block-bootstrap uncertainty,
and BH-FDR control, plus stability diagnostics and a synthetic
benchmark with known ground truth.
"""

__version__ = "0.1.0"
