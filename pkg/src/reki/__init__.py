"""Knowledge-infused CTR prediction: prompt-driven knowledge generation,
dense encoding, hybrid-expert adaptation, and prestorage-based serving."""

__version__ = "0.1.0"
