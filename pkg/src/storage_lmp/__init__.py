"""Storage-augmented DC economic dispatch with locational prices and MCI."""
from .model import (Bus, CaseError, Line, NetworkInstance, PoolInstance, QuadraticCost,
                    UserProfile, bundled_case, load_case, pool_of, validate_network)

__version__ = "0.1.0"

__all__ = [
    "Bus", "CaseError", "Line", "NetworkInstance", "PoolInstance", "QuadraticCost",
    "UserProfile", "bundled_case", "load_case", "pool_of", "validate_network",
]
