"""Decentralized two-agent world models with emergent message exchange."""

__version__ = "0.1.0"
