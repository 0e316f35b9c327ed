"""SRv6 user plane for 5G edge access, as a deterministic simulation.

SR gateways map GTP-U into SRv6 and back, a controller speaks PFCP to the
SMF as a single UPF and compiles sessions into per-gateway steering rules,
and a discrete-event harness runs whole scenarios over real packet bytes.
"""

__version__ = "0.1.0"
