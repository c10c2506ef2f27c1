"""kinesis: IMU motion-signal analysis for physical-education classes.

Raw wearable signals go through a cascaded model stack -- motion detection,
activity recognition, action quality assessment -- producing structured
(time interval, action label, quality score) triplets, which feed templated
prompts for LLM-generated student and class reports.
"""

__version__ = "0.1.0"

from .signals import (
    CANONICAL_RATE_HZ,
    ImuSample,
    NormStats,
    SignalSequence,
    WindowConfig,
    apply_norm,
    fit_norm_stats,
    invert_norm,
    load_signal,
    resample,
    save_signal,
    slice_windows,
)

__all__ = [
    "CANONICAL_RATE_HZ",
    "ImuSample",
    "NormStats",
    "SignalSequence",
    "WindowConfig",
    "apply_norm",
    "fit_norm_stats",
    "invert_norm",
    "load_signal",
    "resample",
    "save_signal",
    "slice_windows",
    "__version__",
]
