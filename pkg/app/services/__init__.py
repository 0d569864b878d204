"""Metric, training, attack and evaluation services.

The HTTP service instance lives in ``app.services.metric_service`` and is
imported explicitly so command-line runs never load the served checkpoint.
"""
