"""flowcf: next-activity prediction on event logs with milestone-aware
counterfactual explanations."""

__version__ = "0.1.0"
