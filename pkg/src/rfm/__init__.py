"""Flow matching on Riemannian manifolds and triangle meshes.

Subpackages are imported lazily by the command line; the names below are
the usual entry points for library use.
"""

from .errors import RFMError
from .geometry import SPD, FlatTorus, PoincareBall, Sphere, manifold_from_tag

__version__ = "0.1.0"

__all__ = ["SPD", "FlatTorus", "PoincareBall", "RFMError", "Sphere", "__version__", "manifold_from_tag"]
