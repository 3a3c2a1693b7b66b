"""Checkpoint-restart runtime for accelerator applications using managed memory.

The device is simulated inside a proxy process; applications talk to it
through :class:`crum.client.Session` (usually obtained from :func:`crum_init`).
"""

from .client import DeviceBuffer, ManagedRegion, Session, State, TrackedArray, crum_init
from .errors import CrumError
from .shadow import Mode

__all__ = ["CrumError", "DeviceBuffer", "ManagedRegion", "Mode", "Session", "State",
           "TrackedArray", "crum_init"]
__version__ = "0.1.0"
