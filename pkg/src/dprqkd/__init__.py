"""Simulator for distributed-phase-reference QKD: DPTS, DPS and COW, with a BB84 decoy reference."""

from .model import (
    ChannelSpec,
    ClassicalChannelSpec,
    Config,
    ConfigError,
    DetectorSpec,
    ProtocolId,
    SystemParams,
    default_config,
    ideal_config,
    load_config,
)

__version__ = "0.1.0"
