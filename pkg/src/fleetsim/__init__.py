"""Virtual-time simulator for event-driven orchestration of a vehicle/cloud cluster."""

__version__ = "0.1.0"
