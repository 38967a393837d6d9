"""Human-to-robot hand motion retargeting with contact-aware grasp refinement."""

__version__ = "0.1.0"

from .hand_model import KinematicChain, load_chain  # noqa: E402,F401
from .geometry import TriangleMesh, load_mesh  # noqa: E402,F401
