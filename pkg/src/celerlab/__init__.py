"""Payment-channel network routing simulator and off-chain mechanism toolkit."""

__version__ = "0.1.0"
