"""Counterfactual-map guided punctate white matter lesion segmentation."""

__version__ = "0.1.0"
