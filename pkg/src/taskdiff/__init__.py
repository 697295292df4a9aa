"""Matrix-free posterior sampling for linear Gaussian inverse problems with
score-based diffusion.

The conditional score of the posterior is obtained exactly from a
task-dependent unconditional score through affine transformations of the
state, so the online sampling phase needs no forward-operator evaluations.
Closed-form Gaussian score models make the whole pipeline exactly testable
against conjugate-posterior oracles.
"""

__version__ = "0.1.0"
