"""Hierarchical distribution-system state estimation.

Layer 1 runs weighted-least-squares branch-current estimation over the
primary feeder; layer 2 runs one actor-critic estimator per secondary
transformer.  The two exchange transformer voltages and net injections until
the boundary settles.
"""

__version__ = "0.1.0"
