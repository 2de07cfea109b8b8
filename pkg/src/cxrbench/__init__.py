"""Transfer-learning benchmark harness for binary chest X-ray classification."""

__version__ = "0.1.0"
