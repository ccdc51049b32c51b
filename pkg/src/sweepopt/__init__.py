"""Optimal control of controlled sweeping processes by exponential penalization.

Modules
-------
geometry     constraint sets ``C = {psi <= 0}``, classification and projection
instance     problem data, endpoint sets and the built-in instances
schedule     penalty sequence and stage-dependent endpoint data
dynamics     penalized and catching-up integration
controls     grid controls, control sets and projections
optimizer    penalty continuation with adjoint gradients
certificate  numerical check of first-order optimality conditions
cli          command-line front end
"""

from .backend import HAVE_COMPILED
from .certificate import analytic_candidate, certify
from .controls import GridControl
from .dynamics import integrate_catching_up, integrate_penalized
from .errors import SweepError
from .instance import builtin, closed_form_solution, registered
from .optimizer import continuation_solve
from .schedule import make_schedule

__version__ = "0.1.0"

__all__ = [
    "HAVE_COMPILED", "GridControl", "SweepError", "analytic_candidate", "builtin", "certify",
    "closed_form_solution", "continuation_solve", "integrate_catching_up", "integrate_penalized",
    "make_schedule", "registered",
]
