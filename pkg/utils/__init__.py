"""
Utilities package: signal processing, losses, data pipeline, training,
inference, evaluation and report/figure export.
"""
