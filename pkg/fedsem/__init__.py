"""
fedsem package
--------------

Simulator of a federated zero-shot intrusion detector: semantic
prototypes from three encoders, trust-weighted aggregation of linear
projections, zero-shot attribution and zero-day scoring, with attack
scenarios, metrics and an experiment command line.
"""

__version__ = "0.1.0"
