"""f-divergences, their convex conjugates, and sample-based variational bounds.

For a generator ``f`` and any critic ``T``::

    D_f(P || Q) >= E_P[T] - E_Q[f*(T)]

with equality at ``T = f'(dP/dQ)``.  Mutual information terms are the
special case ``P = joint`` and ``Q = product of marginals``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, as_tensor, where

NAMES = ("kl", "chi2")
DV_FORMS = ("nwj", "paper")
CHI2_FLOOR = -2.0
DEFAULT_BOUND = 10.0


@dataclass(frozen=True)
class FDivergence:
    """Generator/conjugate pair.

    ``dv_form`` only affects ``kl``: ``"nwj"`` uses the exact conjugate
    ``exp(t - 1)``; ``"paper"`` uses ``exp(t)``, which shifts the bound down by
    one nat at the optimum but has the same maximising critic up to a shift.
    """

    name: str = "kl"
    dv_form: str = "nwj"

    def __post_init__(self):
        if self.name not in NAMES:
            raise ConfigError(f"unknown f-divergence {self.name!r}; expected one of {NAMES}")
        if self.dv_form not in DV_FORMS:
            raise ConfigError(f"unknown dv_form {self.dv_form!r}; expected one of {DV_FORMS}")

    def generator(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.name == "kl":
            safe = np.where(u > 0, u, 1.0)
            return np.where(u > 0, u * np.log(safe), 0.0)
        return (u - 1.0) ** 2

    def derivative(self, u):
        """f'(u): the critic value at which the conjugate bound is tight."""
        u = np.asarray(u, dtype=np.float64)
        if self.name == "kl":
            return np.log(u) + 1.0
        return 2.0 * (u - 1.0)

    def conjugate(self, t):
        return conjugate(self, t)


def get(name, dv_form="nwj"):
    if isinstance(name, FDivergence):
        return name
    return FDivergence(name, dv_form)


def conjugate(f, t):
    """f*(t) on arrays or tensors.

    For chi2 the supremum runs over ``u >= 0``, so ``f*(t) = t + t^2/4`` for
    ``t >= -2`` and ``-1`` below.
    """
    f = get(f)
    if isinstance(t, Tensor):
        if f.name == "kl":
            return (t - 1.0).exp() if f.dv_form == "nwj" else t.exp()
        return where(t.data >= CHI2_FLOOR, t + t * t * 0.25, -1.0)
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ContractError("conjugate argument must be finite")
    if f.name == "kl":
        return np.exp(t - 1.0) if f.dv_form == "nwj" else np.exp(t)
    return np.where(t >= CHI2_FLOOR, t + t * t / 4.0, -1.0)


def clamp_critic(values, bound=DEFAULT_BOUND):
    """Smoothly squash raw critic outputs into ``[-bound, bound]``."""
    if isinstance(values, Tensor):
        return (values * (1.0 / bound)).tanh() * bound
    return bound * np.tanh(np.asarray(values, dtype=np.float64) / bound)


def _prepare(f, values):
    values = as_tensor(values)
    if values.ndim == 2 and values.shape[1] == 1:
        values = values.reshape(-1)
    if values.size == 0:
        raise ContractError("variational bound needs non-empty batches")
    if f.name == "chi2":
        values = values.clip(lo=CHI2_FLOOR)
    return values


def _average(values, weights):
    if weights is None:
        return values.mean()
    weights = as_tensor(weights)
    if weights.shape != values.shape:
        raise ContractError(f"weights shape {weights.shape} does not match values {values.shape}")
    return (values * weights).sum()


def variational_div_lower_bound(f, critic_on_P, critic_on_Q, weights_P=None, weights_Q=None):
    """E_P[T] - E_Q[f*(T)] from critic evaluations on samples of P and Q.

    Without weights both expectations are plain means.  With weights each
    expectation is ``sum(w * value)``; weights are expected to sum to one and
    may be tensors, in which case the bound is differentiable through them.
    """
    f = get(f)
    tp = _prepare(f, critic_on_P)
    tq = _prepare(f, critic_on_Q)
    return _average(tp, weights_P) - _average(conjugate(f, tq), weights_Q)


@dataclass
class Batch:
    """Critic inputs (rows) with optional per-row probability weights."""

    inputs: np.ndarray
    weights: object = None

    def __len__(self):
        return len(self.inputs)


def mi_loss(f, critic, joint_batch, product_batch):
    """Variational lower bound on D_f(joint || product) using ``critic``."""
    if len(joint_batch) == 0 or len(product_batch) == 0:
        raise ContractError("variational bound needs non-empty batches")
    return variational_div_lower_bound(
        f, critic(joint_batch.inputs), critic(product_batch.inputs),
        joint_batch.weights, product_batch.weights,
    )


def conditional_mi_loss(f, critic, joint_batch, conditional_product_batch):
    """Variational lower bound on I_f(Y; X,A | R).

    ``conditional_product_batch`` rows pair each ``(x, a, r)`` with a feedback
    drawn from the empirical ``P(Y | R = r)``; building it is the caller's job.
    """
    return mi_loss(f, critic, joint_batch, conditional_product_batch)
