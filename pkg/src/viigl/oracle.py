"""Exact information quantities on small enumerable distributions.

Everything here is plain summation over probability tables; nothing is
sampled.  These functions are the reference values the estimators and the
trainer are checked against.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import fdiv
from .errors import ContractError, NonFiniteError, ShapeError

KAHAN_THRESHOLD = 10_000
MAX_GRID_TABLES = 1_000_000


def _sum(values):
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size <= KAHAN_THRESHOLD:
        return float(values.sum())
    return math.fsum(values)


def divergence(f, p, q):
    """D_f(P || Q) = sum_s q(s) f(p(s) / q(s)) with 0 * f(0/0) = 0."""
    f = fdiv.get(f)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes {p.shape} and {q.shape} differ")
    if np.any((q == 0) & (p > 0)):
        return math.inf
    live = q > 0
    ratio = np.divide(p, q, out=np.ones_like(p), where=live)
    return _sum(np.where(live, q * f.generator(ratio), 0.0))


def _check_joint(p, ndim=None):
    p = np.asarray(p, dtype=np.float64)
    if ndim is not None and p.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-D joint table, got shape {p.shape}")
    if np.any(p < 0):
        raise ContractError("joint has negative entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ContractError(f"joint sums to {p.sum():.12g}, not 1")
    return p


def exact_f_mi(joint, f="kl"):
    """I_f(Z1; Z2) for a 2-D table ``joint[z1, z2]`` (nats for kl)."""
    p = _check_joint(joint, 2)
    return divergence(f, p, np.outer(p.sum(axis=1), p.sum(axis=0)))


def exact_f_cmi(joint, f="kl"):
    """I_f(Z1; Z2 | Z3) for a 3-D table ``joint[z1, z2, z3]``.

    Computed as the Z3-average of the slice-wise f-MI; empty slices add 0.
    """
    p = _check_joint(joint, 3)
    total = 0.0
    for k in range(p.shape[2]):
        mass = p[:, :, k].sum()
        if mass <= 0:
            continue
        total += mass * exact_f_mi(p[:, :, k] / mass, f)
    return total


def group(table, *axis_groups):
    """Reshape ``table`` so each group of axes becomes one flattened axis."""
    table = np.asarray(table)
    order = [ax for g in axis_groups for ax in g]
    if sorted(order) != list(range(table.ndim)):
        raise ShapeError(f"axis groups {axis_groups} do not partition {table.ndim} axes")
    moved = np.transpose(table, order)
    sizes = [int(np.prod([table.shape[ax] for ax in g])) for g in axis_groups]
    return moved.reshape(sizes)


@dataclass
class DiscreteJoint:
    """Probability table ``p[x, a, r, y]`` over finite index sets."""

    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 4:
            raise ShapeError(f"joint table must be 4-D (x, a, r, y), got {self.table.shape}")
        if np.any(self.table < 0):
            raise ContractError("joint has negative entries")
        if abs(self.table.sum() - 1.0) > 1e-12:
            raise ContractError(f"joint sums to {self.table.sum():.15g}, not 1")

    @property
    def dims(self):
        return self.table.shape

    def xay(self):
        """Marginal p[x, a, y] (true reward summed out)."""
        return self.table.sum(axis=2)

    def mi_y_r(self, f="kl"):
        """I_f(Y; R) for the true latent reward."""
        return exact_f_mi(self.table.sum(axis=(0, 1)).T, f)

    def cmi_y_xa_given_r(self, f="kl"):
        return exact_f_cmi(group(self.table, (3,), (0, 1), (2,)), f)

    def feedback_support(self):
        return np.flatnonzero(self.table.sum(axis=(0, 1, 2)) > 0)


@dataclass
class DecoderTable:
    """psi(input) for every enumerable input.

    ``values`` has shape ``(|Y|,)`` for mode ``"y"`` or ``(|X|, |A|, |Y|)`` for
    mode ``"xay"``; entries are clamped to ``[c, 1 - c]``.
    """

    values: np.ndarray
    mode: str = "y"
    c: float = 0.0

    def __post_init__(self):
        if self.mode not in ("y", "xay"):
            raise ContractError(f"decoder mode must be 'y' or 'xay', got {self.mode!r}")
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), self.c, 1.0 - self.c)

    def flipped(self):
        return DecoderTable(1.0 - self.values, self.mode, self.c)

    def on(self, dims):
        """Broadcast to shape ``(|X|, |A|, |Y|)``."""
        if self.mode == "y":
            return np.broadcast_to(self.values, dims)
        if self.values.shape != tuple(dims):
            raise ShapeError(f"decoder table {self.values.shape} does not cover joint {dims}")
        return self.values


def decoded_joint(joint, decoder):
    """q[x, a, y, r] = p(x, a, y) * P(R_psi = r | x, a, y)."""
    if isinstance(joint, DiscreteJoint):
        joint = joint.xay()
    p = np.asarray(joint, dtype=np.float64)
    psi = decoder.on(p.shape)
    return np.stack([p * (1.0 - psi), p * psi], axis=-1)


def _terms_batched(q, f1, f2):
    """Both objective terms for a stack of decoded joints ``q[..., s, y, r]``."""
    f1, f2 = fdiv.get(f1), fdiv.get(f2)
    q_r = q.sum(axis=(-3, -2))                       # [..., r]
    q_sr = q.sum(axis=-2)                            # [..., s, r]
    q_yr = q.sum(axis=-3)                            # [..., y, r]
    prod = q_sr[..., :, None, :] * q_yr[..., None, :, :]
    r_mass = q_r[..., None, None, :]
    ref = np.divide(prod, r_mass, out=np.zeros_like(prod), where=r_mass > 0)
    live = ref > 0
    ratio = np.divide(q, ref, out=np.ones_like(q), where=live)
    cmi = np.where(live, ref * f1.generator(ratio), 0.0).sum(axis=(-3, -2, -1))

    q_s = q_sr.sum(axis=-1)
    ref2 = q_s[..., :, None] * q_r[..., None, :]
    live2 = ref2 > 0
    ratio2 = np.divide(q_sr, ref2, out=np.ones_like(q_sr), where=live2)
    mi = np.where(live2, ref2 * f2.generator(ratio2), 0.0).sum(axis=(-2, -1))
    return cmi, mi


def objective_terms(joint, decoder, f1="kl", f2="kl"):
    """(I_f1(Y; X,A | R_psi), I_f2(X,A; R_psi)) for a decoder table."""
    q = decoded_joint(joint, decoder)
    nx, na, ny, _ = q.shape
    s_first = q.reshape(nx * na, ny, 2)
    cmi = exact_f_cmi(np.transpose(s_first, (1, 0, 2)), f1)
    mi = exact_f_mi(s_first.sum(axis=1), f2)
    return cmi, mi


def exact_objective(joint, decoder, beta, f1="kl", f2="kl"):
    """I_f1(Y; X,A | R_psi) - beta * I_f2(X,A; R_psi), computed analytically."""
    cmi, mi = objective_terms(joint, decoder, f1, f2)
    return cmi - beta * mi


def chain_rule_terms(joint):
    """KL terms of I(Y;S|R) = I(Y;R|S) - I(Y;R) + I(Y;S) for ``joint[s, y, r]``."""
    q = np.asarray(joint, dtype=np.float64)
    lhs = exact_f_cmi(np.transpose(q, (1, 0, 2)), "kl")        # I(Y; S | R)
    i_y_r_given_s = exact_f_cmi(np.transpose(q, (1, 2, 0)), "kl")
    i_y_r = exact_f_mi(q.sum(axis=0), "kl")
    i_y_s = exact_f_mi(q.sum(axis=2).T, "kl")
    return lhs, i_y_r_given_s - i_y_r + i_y_s


@dataclass
class GridResult:
    decoder: DecoderTable
    value: float
    cmi: float
    mi: float
    n_evaluated: int


def grid_minimize_objective(joint, beta, resolution=9, input_mode="y", f1="kl", f2="kl",
                            c=0.0, chunk=20_000):
    """Exhaustive search over decoder tables with entries on a uniform grid.

    Only inputs with positive probability get a free entry; the decoder value
    elsewhere has no effect on either term and is pinned to ``c``.
    """
    if isinstance(joint, DiscreteJoint):
        joint = joint.xay()
    p = np.asarray(joint, dtype=np.float64)
    nx, na, ny = p.shape
    if input_mode == "y":
        support = np.flatnonzero(p.sum(axis=(0, 1)) > 0)
        free_shape = (ny,)
    elif input_mode == "xay":
        support = np.flatnonzero(p.reshape(-1) > 0)
        free_shape = (nx, na, ny)
    else:
        raise ContractError(f"input_mode must be 'y' or 'xay', got {input_mode!r}")
    n_tables = resolution ** len(support)
    if n_tables > MAX_GRID_TABLES:
        raise ContractError(
            f"grid search needs {resolution}^{len(support)} = {n_tables:.3g} tables, "
            f"above the limit of {MAX_GRID_TABLES}")
    grid = np.linspace(c, 1.0 - c, resolution)

    best = None
    s_p = p.reshape(nx * na, ny)
    combos = itertools.product(range(resolution), repeat=len(support))
    evaluated = 0
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        tables = np.full((len(block), int(np.prod(free_shape))), c)
        tables[:, support] = grid[block]
        if input_mode == "y":
            psi = np.broadcast_to(tables[:, None, :], (len(block), nx * na, ny))
        else:
            psi = tables.reshape(len(block), nx * na, ny)
        q = np.stack([s_p * (1.0 - psi), s_p * psi], axis=-1)
        cmi, mi = _terms_batched(q, f1, f2)
        values = cmi - beta * mi
        i = int(np.argmin(values))
        if best is None or values[i] < best[0]:
            best = (float(values[i]), tables[i].reshape(free_shape).copy(), float(cmi[i]), float(mi[i]))
        evaluated += len(block)
    value, table, cmi, mi = best
    return GridResult(DecoderTable(table, input_mode, c), value, cmi, mi, evaluated)


def finite_diff_gradcheck(fn, params, point=None, step=1e-5, floor=1e-2):
    """Worst relative error between autodiff and central differences.

    ``fn()`` must rebuild the scalar loss from the current values of
    ``params``.  The error per coordinate is ``|g_auto - g_fd| /
    max(|g_auto|, |g_fd|, floor)``, so coordinates with near-zero gradient are
    effectively compared in absolute terms.
    """
    if not step > 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    if point is not None:
        for p, v in zip(params, point):
            p.data[...] = v
    for p in params:
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.item()):
        raise NonFiniteError(f"function value is not finite: {loss.item()}")
    loss.backward()
    auto = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, auto):
        flat = p.data.reshape(-1)
        g_flat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"non-finite evaluation near coordinate {i} of {p!r}")
            numeric = (up - down) / (2.0 * step)
            err = abs(g_flat[i] - numeric) / max(abs(g_flat[i]), abs(numeric), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
