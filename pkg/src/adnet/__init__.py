"""Adaptive dual-network QR code deblurring at desk scale."""

__version__ = "0.1.0"
