"""Critical-region-selector attention, scale-aware gating and detection metrics in numpy."""

__version__ = "0.1.0"
