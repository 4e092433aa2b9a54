"""Multi-task MR-to-CT synthesis with a bone-focused composite loss."""

__version__ = "0.1.0"
