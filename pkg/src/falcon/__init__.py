"""3-party honest-majority secure computation over replicated secret sharing."""

from .netspec import LayerSpec, NetworkSpec
from .prep import DealerPrep, DistributedPrep, FilePrep
from .rings import RingParams, decode_fixed, encode_fixed
from .rss import PartyId, RssShare, share_secret
from .session import AbortError, PartySession, ThreatModel, run_three_parties

__all__ = [
    "RingParams",
    "encode_fixed",
    "decode_fixed",
    "PartyId",
    "RssShare",
    "share_secret",
    "ThreatModel",
    "PartySession",
    "AbortError",
    "run_three_parties",
    "DealerPrep",
    "DistributedPrep",
    "FilePrep",
    "LayerSpec",
    "NetworkSpec",
]

__version__ = "0.1.0"
