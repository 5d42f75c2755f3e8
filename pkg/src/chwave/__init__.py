"""Conservative Camassa-Holm solutions in Lagrangian coordinates: wave
breaking, accumulation of breaking times and the cuspon."""

__version__ = "0.1.0"
