"""Toy-scale lab for pruning and finetuning small diffusion models.

Everything runs on numpy float64 with explicit seeding. The package is
organized bottom-up: an autodiff core, a score network and its checkpoint
format, discrete diffusion schedules and samplers, analytic mixture data
with distribution metrics, training losses (noise prediction, distillation,
Jacobian matching), finite-time Lyapunov diagnostics, pruning criteria, and
an experiment harness with a CLI on top.
"""

__version__ = "0.1.0"
