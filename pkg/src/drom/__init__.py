"""Distributed robust online multi-task learning.

Modules: ``linalg`` (power iteration, SVD oracle), ``losses`` (hinge and
logistic losses, capped L_p reweighting), ``optimizer`` (primal-dual steps and
regret bounds), ``topology`` (communication graphs), ``data`` (task streams),
``simnet`` (round-based protocol simulator), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
