"""Simulated permissioned-ledger framework for sharing tasks between edge servers."""

__version__ = "0.1.0"
