"""Mean-field trajectory diffusion planning for many-agent offline RL.

Desk-scale pipeline: mean-field Q-learning collectors, offline datasets,
a value-weighted mean-field score model trained with hierarchical
subdivision, a coarse-to-fine reverse-SDE planner with agent branching,
and estimators for the verifiable quantities (work counts, exploitability,
Wasserstein/PoC rates, horizon exponents).
"""

__version__ = "0.1.0"
