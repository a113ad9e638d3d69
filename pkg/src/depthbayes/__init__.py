"""depthbayes: parameter-efficient subspaces and post-hoc Bayesian posteriors
for a toy monocular-depth network."""

__version__ = "0.1.0"
