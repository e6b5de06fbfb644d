"""Predict hypoxia-tracer PET volumes from multi-channel MRI with a 3D
adversarial transformer, on real or synthetic phantom data."""

__version__ = "0.1.0"
