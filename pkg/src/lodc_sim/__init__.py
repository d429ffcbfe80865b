"""Simulation and analysis of LO-biased DC-OFDM links over a Rydberg atomic sensor."""

from lodc_sim.amam import AmAmModel, TaylorSeries
from lodc_sim.bussgang import BussgangAnalysis, OperatingPoint, analyze
from lodc_sim.ofdm import LinkConfig

__all__ = [
    "AmAmModel",
    "TaylorSeries",
    "BussgangAnalysis",
    "OperatingPoint",
    "LinkConfig",
    "analyze",
]

__version__ = "0.1.0"
