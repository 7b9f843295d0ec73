"""successor-lab: a finite-state laboratory for successor-matrix learning.

Everything revolves around the successor matrix M = (Id - gamma*P)^{-1} of a
finite Markov reward process. The package implements and cross-validates,
against dense oracles:

* exact oracles, norms, samplers, and the time-reversed process (``mrp``);
* stochastic tabular TD learners for M and V, including backward, mixed,
  multi-step, and relative variants (``learners``);
* incremental empirical-process estimation with rank-one inverse updates and
  its error bounds (``process_estimation``);
* Newton-type inversion steps with path-doubling behavior (``newton``);
* rank-r forward-backward factor models and their fixed-point geometry
  (``lowrank``);
* goal-conditioned optimal values on finite MDPs (``goals``);
* continuous-time operator flows and spectral rate analysis (``flows``);
* benchmark environments (``envs``) and a reproducible experiment runner
  with CSV/SVG outputs (``experiments``, ``cli``).
"""

from . import envs, experiments, flows, goals, learners, lowrank, mrp, newton, process_estimation

__version__ = "0.1.0"

__all__ = [
    "envs",
    "experiments",
    "flows",
    "goals",
    "learners",
    "lowrank",
    "mrp",
    "newton",
    "process_estimation",
    "__version__",
]
