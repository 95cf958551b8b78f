"""rmtlab: a desk-scale laboratory for sparse random-matrix spectra.

Library layers:

- :mod:`rmtlab.linalg` -- spectral decompositions and Stieltjes transforms
- :mod:`rmtlab.ensembles` -- graph and GOE samplers with reproducible streams
- :mod:`rmtlab.freeconv` -- free convolution with the semicircle law
- :mod:`rmtlab.flows` -- matrix and spectral stochastic flows
- :mod:`rmtlab.momentflow` -- the eigenvector moment flow and its duality
- :mod:`rmtlab.stats` -- normality, QUE, rigidity, and local-law statistics
- :mod:`rmtlab.experiments` -- seeded experiment orchestration
- :mod:`rmtlab.cli` -- the ``rmtlab`` command line
"""

__version__ = "0.1.0"

from .linalg import (  # noqa: F401
    EmpiricalMeasure,
    SpectralDecomposition,
    SpectralDomain,
    eigendecompose,
    green_entry,
    isotropic_form,
    semicircle_stieltjes,
    stieltjes_transform,
)
