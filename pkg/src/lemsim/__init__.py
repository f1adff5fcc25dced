"""Local electricity market simulator for three-phase LV feeders.

Library layout follows the pipeline: netmodel -> powerflow -> forecast ->
detect -> market/optim -> scenario, with data/report/cli providing I/O and
the command-line entry point.
"""

__version__ = "0.1.0"

from .errors import InputError, LemsimError, SolverError

__all__ = ["InputError", "LemsimError", "SolverError", "__version__"]
