"""Bracketed raw-image restoration with high/low frequency decomposition."""

from hlnet.container import read_container, write_container
from hlnet.imaging import BracketSequence, RawFrame, preprocess_bracket, tonemap_mu, tonemap_mu_inv
from hlnet.model import HLNet, HLNetConfig, forward, init_params
from hlnet.blocks import HLFDBConfig

__all__ = [
    "BracketSequence",
    "HLFDBConfig",
    "HLNet",
    "HLNetConfig",
    "RawFrame",
    "forward",
    "init_params",
    "preprocess_bracket",
    "read_container",
    "tonemap_mu",
    "tonemap_mu_inv",
    "write_container",
]

__version__ = "0.1.0"
