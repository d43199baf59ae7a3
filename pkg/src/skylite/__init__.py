"""Distributed lockstep traffic simulation at desk scale.

Core pieces: a deterministic fixed-step kinematic world on a lane graph,
IDM/MOBIL behavior models, a host/client lockstep protocol with digest
verification, takeover-driven mixed-policy learning, language-goal reward
synthesis, curriculum scenario search, trajectory replay, and a telemetry
gateway with a browser dashboard on the other end.
"""

__version__ = "0.1.0"


class SkyliteError(Exception):
    """Base class for every error this package raises on purpose."""
