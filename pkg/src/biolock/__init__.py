"""Biometric key generation and device-locking simulation toolkit.

Subpackages:

- ``sigproc``: ECG filtering, R-peak detection, segmentation, NCN features
- ``synthecg``: McSharry-model ECG synthesis, noise generators, SNR mixing
- ``quantizer``: margin-optimized feature quantization (IOMBA / NA-IOMBA)
- ``ecc``: fuzzy-commitment repetition code
- ``pufsim``: arbiter PUF simulation, CRP collection, model training
- ``locknet``: LUT netlist obfuscation and evaluation
- ``protocol``: device/designer actors and the lock/unlock flow
- ``bench``: experiment configs, sweeps, report files
"""

from . import bench, ecc, locknet, protocol, pufsim, quantizer, sigproc, synthecg
from .errors import (BiolockError, ConfigurationError, DegenerateInputError,
                     EnrollmentError, NumericError, ProtocolError)

__version__ = "0.1.0"

__all__ = [
    "bench", "ecc", "locknet", "protocol", "pufsim", "quantizer", "sigproc",
    "synthecg", "BiolockError", "ConfigurationError", "DegenerateInputError",
    "EnrollmentError", "NumericError", "ProtocolError", "__version__",
]
