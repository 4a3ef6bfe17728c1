"""Evaluator worker: builds candidate FCNs from engine-described layer plans,
trains them at toy scale on synthetic volumes, and serves fitness results
over the newline-delimited JSON protocol."""

__version__ = "0.1.0"
