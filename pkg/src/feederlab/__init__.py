"""feederlab: a distribution-feeder protection testbed.

Simulates unbalanced three-phase feeders under randomized fault scenarios,
runs protective-relay agents against them through an observe/act episode
protocol, classifies outcomes, computes rewards, and exports datasets.
"""

from .network import (
    Bus,
    DerSpec,
    DeviceLocation,
    Diagnostic,
    Line,
    LineCode,
    LoadSpec,
    Network,
    NetworkError,
    PhaseSet,
    SourceSpec,
    Transformer,
    Winding,
    ground_path_exists,
    to_canonical_text,
    validate,
)
from .dssparse import DssSyntaxError, parse_dss, parse_dss_detailed

__version__ = "0.1.0"
