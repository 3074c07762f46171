"""Single-process simulator for federated optimization with shuffled
client participation, plus numerical verification of its variance analysis."""

__version__ = "0.1.0"
