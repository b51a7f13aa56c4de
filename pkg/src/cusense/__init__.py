"""Desk-scale dApp telemetry framework and uplink-CSI localization pipeline."""

__version__ = "0.1.0"
