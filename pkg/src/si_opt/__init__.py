"""Signal-integrity simulation and optimization toolkit."""
