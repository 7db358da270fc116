"""EtherNet/IP (CIP) client stack for ControlLogix-style tag access.

Layers: `encap` (TCP framing and sessions), `cip` (service codec),
`tags` (address parsing and BOOL-array remapping), `client` (session
round trips), `scanner` (periodic batched scanning), `plcsim` (soft PLC),
`cli` (command-line tool).
"""

from .cip import CipError, CipStatusError, CipType, CipValue
from .client import PlcClient, PlcEndpoint, PlcError, PlcTimeout
from .encap import DEFAULT_PORT, EncapError
from .scanner import Direction, Quality, TagScanner
from .tags import TagRef, bool_remap, dint_span_for_bools, parse_tag

__version__ = "0.1.0"

__all__ = [
    "CipError",
    "CipStatusError",
    "CipType",
    "CipValue",
    "DEFAULT_PORT",
    "Direction",
    "EncapError",
    "PlcClient",
    "PlcEndpoint",
    "PlcError",
    "PlcTimeout",
    "Quality",
    "TagRef",
    "TagScanner",
    "bool_remap",
    "dint_span_for_bools",
    "parse_tag",
    "__version__",
]
