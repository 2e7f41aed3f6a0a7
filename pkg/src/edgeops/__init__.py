"""Edge AIOps toolkit: collection, streaming detection, root-cause ranking,
action recommendation and placement of analysis workloads."""

__version__ = "0.1.0"
