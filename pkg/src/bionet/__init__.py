"""Desk-scale biometric transaction-authorization network.

Subpackages: synthetic fingerprint templates, a cylinder-code minutiae
matcher, an encrypted framed wire protocol, PIN-sharded identification
servers with scatter-gather clustering, acquirer gateway and issuer bank
roles, and a simulation/benchmark harness with a capacity model.
"""

__version__ = "0.1.0"
