"""Desk-scale RAW -> RGB low-light pipeline."""
