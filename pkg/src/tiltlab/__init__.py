"""tiltlab: exponential-tilt score attacks and private query release."""

__version__ = "0.1.0"
