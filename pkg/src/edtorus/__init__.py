"""edtorus: spectral laboratory for a Dirac-eigenpair-constrained conformal
flow on the flat spin 3-torus."""

__version__ = "0.1.0"

from .fields import (  # noqa: F401
    ExponentTable,
    ScalarField,
    SpinorField,
    SpinStructure,
    TorusGrid,
)
from .pencil import EigenPair, SpectrumWindow  # noqa: F401
