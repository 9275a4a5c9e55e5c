"""Booking-weighted stay-length analytics."""

from .ingest import BookingTable, Phase, PhaseBoundaries, assign_phase, load_bookings, monthly_aggregate

__version__ = "0.1.0"

__all__ = ["BookingTable", "Phase", "PhaseBoundaries", "assign_phase", "load_bookings", "monthly_aggregate"]
