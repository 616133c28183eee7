"""SOFA and legacy HRTF release conversion into the .hds container."""

from .convert import (
    ConversionSpec,
    ConversionError,
    RoundtripReport,
    convert,
    convert_sofa,
    load_anthropometry,
    magnitudes_from_impulse_responses,
    validate_roundtrip,
)

__all__ = [
    "ConversionSpec",
    "ConversionError",
    "RoundtripReport",
    "convert",
    "convert_sofa",
    "load_anthropometry",
    "magnitudes_from_impulse_responses",
    "validate_roundtrip",
]
