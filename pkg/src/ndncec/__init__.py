"""Deterministic NDN router simulator and covert ephemeral communication channels."""

from .covert import (Codebook, Message, ProtocolParams, Technique, decide_row, derive_codebook,
                     estimate_pit_threshold, estimate_threshold)
from .engine import MS, NS, S, T_MIN, US, Engine
from .harness import (ConstraintViolation, ExperimentSpec, TrialReport, emit_csv, privacy_game,
                      run_trial, simulate_trial, sweep)
from .names import DataPacket, Interest, Name, parse_name, render_name
from .netsim import Network, build_topology
from .node import ContentStore, Producer, ReplacementPolicy, Router, RouterConfig

__version__ = "0.1.0"

__all__ = [
    "Codebook", "Message", "ProtocolParams", "Technique", "decide_row", "derive_codebook",
    "estimate_pit_threshold", "estimate_threshold", "MS", "NS", "S", "T_MIN", "US", "Engine",
    "ConstraintViolation", "ExperimentSpec", "TrialReport", "emit_csv", "privacy_game", "run_trial",
    "simulate_trial", "sweep", "DataPacket", "Interest", "Name", "parse_name", "render_name",
    "Network", "build_topology", "ContentStore", "Producer", "ReplacementPolicy", "Router", "RouterConfig",
]
