"""Market-based coordination of flexible loads.

Subpackages cover the device models, the double-auction clearing rule, the
vectorized population simulator, the aggregate bin-transition model with its
identification routines, an interior-point QP solver, and the predictive
price scheduler built on top of it.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("transactive")
except PackageNotFoundError:  # pragma: no cover - source tree without install
    __version__ = "0+unknown"
