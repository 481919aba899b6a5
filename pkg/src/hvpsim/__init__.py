"""Desk-scale viscous-plastic sea-ice solver in flow-map coordinates."""

__version__ = "0.1.0"
