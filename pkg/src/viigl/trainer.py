"""Variational min-max training of a latent-reward decoder.

The decoder psi maps feedback (or context-action-feedback) to P(r = 1).  Two
critics estimate the terms of

    L(psi) = I_f1(Y; X,A | R_psi) - beta * I_f2(X,A; R_psi)

through their variational lower bounds: G scores ``(x, a, y, r)`` and T scores
``(x, a, r)``.  The critics ascend their bounds; the decoder descends L.

Each decoded reward enters the bounds as a probability weight ``psi_r`` on the
row ``(x, a, y, r)`` for both ``r`` in {0, 1}, which is what makes L
differentiable in the decoder parameters.  Hard Bernoulli draws are only used
to build the pools from which the conditional-product feedback is resampled.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import fdiv
from .errors import ClassStarvationError, ConfigError, ContractError, NonFiniteError
from .fdiv import Batch
from .nn import build_net
from .optim import Ema, Optimizer, clip_grad_norm
from .tensor import Tensor, concat

log = logging.getLogger(__name__)

INPUT_MODES = ("y", "xay")


@dataclass
class TrainConfig:
    beta: float = 10.0
    f1: str = "kl"
    f2: str = "kl"
    dv_form: str = "nwj"
    n_aug: int = 5
    lr: float = 1e-3
    epochs: int = 1000
    batch_size: int = 600
    seed: int = 0
    ema_rate: float = 0.99
    use_ema: bool = True
    clip_norm: float = 1.0
    clamp_c: float = 0.01
    critic_bound: float = fdiv.DEFAULT_BOUND
    input_mode: str = "y"
    schedule: str = "alternate"
    critic_phase: int = 1
    decoder_phase: int = 1
    hidden: int = 64
    image_hidden: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.n_aug < 1:
            raise ConfigError(f"augmentation count must be at least 1, got {self.n_aug}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if self.schedule not in ("alternate", "simultaneous"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0 < self.clamp_c < 0.5:
            raise ConfigError(f"decoder clamp must lie in (0, 0.5), got {self.clamp_c}")
        if self.critic_phase < 1 or self.decoder_phase < 1:
            raise ConfigError("phase lengths must be at least 1")
        fdiv.get(self.f1, self.dv_form)
        fdiv.get(self.f2, self.dv_form)

    @property
    def div1(self):
        return fdiv.get(self.f1, self.dv_form)

    @property
    def div2(self):
        return fdiv.get(self.f2, self.dv_form)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def one_hot(actions, num_actions):
    out = np.zeros((len(actions), num_actions))
    out[np.arange(len(actions)), np.asarray(actions, dtype=np.int64)] = 1.0
    return out


def _blocks(parts, image_hidden):
    return [(w, image_hidden if (image_hidden and big) else None) for w, big in parts]


class RewardDecoder:
    """psi(input) in [c, 1 - c]: a sigmoid network squashed affinely into the band."""

    def __init__(self, net, input_mode, num_actions, c=0.01, flipped=False):
        if input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}, got {input_mode!r}")
        self.net = net
        self.input_mode = input_mode
        self.num_actions = num_actions
        self.c = c
        self.flipped = flipped

    def inputs(self, x, a, y):
        if self.input_mode == "y":
            return np.asarray(y, dtype=np.float64)
        return np.hstack([x, one_hot(a, self.num_actions), y])

    def __call__(self, x, a, y):
        prob = self.net(self.inputs(x, a, y)).reshape(-1)
        psi = prob * (1.0 - 2.0 * self.c) + self.c
        return 1.0 - psi if self.flipped else psi

    def probs(self, x, a, y):
        with_grad = [p.requires_grad for p in self.parameters()]
        for p in self.parameters():
            p.requires_grad = False
        try:
            return self(x, a, y).data.copy()
        finally:
            for p, flag in zip(self.parameters(), with_grad):
                p.requires_grad = flag

    def opposite(self):
        return RewardDecoder(self.net, self.input_mode, self.num_actions, self.c, not self.flipped)

    def parameters(self):
        return self.net.parameters()


class VariationalCritic:
    """Scalar critic with output squashed into [-bound, bound]."""

    def __init__(self, net, role, bound=fdiv.DEFAULT_BOUND):
        if role not in ("G", "T"):
            raise ConfigError(f"critic role must be 'G' or 'T', got {role!r}")
        self.net = net
        self.role = role
        self.bound = bound

    def __call__(self, inputs):
        return fdiv.clamp_critic(self.net(inputs).reshape(-1), self.bound)

    def parameters(self):
        return self.net.parameters()


def make_models(context_dim, num_actions, feedback_dim, config, rng):
    """Decoder, G and T sized for the given problem.

    With ``config.image_hidden > 0`` the context and feedback blocks each get a
    two-layer encoder and a linear head merges them.
    """
    ih = config.image_hidden
    if config.input_mode == "y":
        dec_parts = [(feedback_dim, True)]
    else:
        dec_parts = [(context_dim, True), (num_actions, False), (feedback_dim, True)]
    dec_net = build_net(_blocks(dec_parts, ih), 1, rng, config.hidden, output_activation="sigmoid")
    g_net = build_net(_blocks([(context_dim, True), (num_actions, False), (feedback_dim, True), (1, False)], ih),
                      1, rng, config.hidden)
    t_net = build_net(_blocks([(context_dim, True), (num_actions, False), (1, False)], ih), 1, rng, config.hidden)
    return (RewardDecoder(dec_net, config.input_mode, num_actions, config.clamp_c),
            VariationalCritic(g_net, "G", config.critic_bound),
            VariationalCritic(t_net, "T", config.critic_bound))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class AugmentedBatch:
    """Base rows with N decoded-reward draws each.

    ``psi`` is the decoder output per base row (a tensor, possibly attached to
    the decoder graph); ``draws[k, i]`` is the i-th Bernoulli(psi_k) sample.
    """

    x: np.ndarray
    a_onehot: np.ndarray
    y: np.ndarray
    psi: Tensor
    draws: np.ndarray

    def __len__(self):
        return len(self.x)


def augment(x, a, y, decoder, n_aug, rng, with_grad=False):
    if n_aug < 1:
        raise ContractError(f"augmentation count must be at least 1, got {n_aug}")
    psi = decoder(x, a, y) if with_grad else Tensor(decoder.probs(x, a, y))
    draws = (rng.random((len(x), n_aug)) < psi.data[:, None]).astype(np.int64)
    return AugmentedBatch(np.asarray(x, dtype=np.float64), one_hot(a, decoder.num_actions),
                          np.asarray(y, dtype=np.float64), psi, draws)


@dataclass
class ProductBatches:
    joint_xayr: Batch
    condprod: Batch
    joint_xar: Batch
    prod_xa_r: Batch
    # base-row index of each resampled feedback in ``condprod`` (diagnostics)
    condprod_source: np.ndarray = field(repr=False, default=None)


def build_product_batches(aug, rng):
    """Samples of P_XAYR, P_{Y|R} x P_XAR, P_XAR and P_XA x P_R.

    Rows are laid out as all base rows with r = 0 followed by all with r = 1;
    each carries weight psi_r(k) / n (or p_hat(r) / n for the product of
    marginals), so every batch is a probability-weighted sample.
    """
    n = len(aug)
    for r in (0, 1):
        if not np.any(aug.draws == r):
            raise ClassStarvationError(r)
    psi = aug.psi
    w_joint = concat([(1.0 - psi) * (1.0 / n), psi * (1.0 / n)], axis=0)
    p1 = psi.mean()
    w_prod = concat([(1.0 - p1).reshape(1) * np.full(n, 1.0 / n), p1.reshape(1) * np.full(n, 1.0 / n)], axis=0)

    r_col = np.repeat([0.0, 1.0], n)[:, None]
    xa = np.vstack([np.hstack([aug.x, aug.a_onehot])] * 2)
    y2 = np.vstack([aug.y, aug.y])

    source = np.empty(2 * n, dtype=np.int64)
    for r in (0, 1):
        counts = (aug.draws == r).sum(axis=1)
        source[r * n:(r + 1) * n] = rng.choice(n, size=n, p=counts / counts.sum())

    return ProductBatches(
        joint_xayr=Batch(np.hstack([xa, y2, r_col]), w_joint),
        condprod=Batch(np.hstack([xa, aug.y[source], r_col]), w_joint),
        joint_xar=Batch(np.hstack([xa, r_col]), w_joint),
        prod_xa_r=Batch(np.hstack([xa, r_col]), w_prod),
        condprod_source=source,
    )


def objective_estimate(batches, G, T, f1, f2, beta):
    """(L_hat, conditional-MI bound, regulariser MI bound) as tensors."""
    cond = fdiv.conditional_mi_loss(f1, G, batches.joint_xayr, batches.condprod)
    reg = fdiv.mi_loss(f2, T, batches.joint_xar, batches.prod_xa_r)
    return cond - reg * beta, cond, reg


# ---------------------------------------------------------------------------
# training state machine
# ---------------------------------------------------------------------------

class _Frozen:
    def __init__(self, params):
        self.params = params

    def __enter__(self):
        for p in self.params:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p in self.params:
            p.requires_grad = True


@dataclass
class EpochStats:
    epoch: int
    objective: float
    cmi: float
    reg: float
    decoded_return: float
    phase: str
    skipped: bool = False


class TrainState:
    def __init__(self, decoder, G, T, config):
        self.decoder, self.G, self.T = decoder, G, T
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.opt_theta = Optimizer(decoder.parameters(), "adam", config.lr)
        self.opt_g = Optimizer(G.parameters(), "adam", config.lr)
        self.opt_t = Optimizer(T.parameters(), "adam", config.lr)
        self.ema = Ema(decoder.parameters() + G.parameters() + T.parameters(), config.ema_rate)
        self.epoch = 0
        self.skipped = 0

    @classmethod
    def create(cls, context_dim, num_actions, feedback_dim, config):
        rng = np.random.default_rng([config.seed, 1])
        return cls(*make_models(context_dim, num_actions, feedback_dim, config, rng), config)

    def phase(self):
        c = self.config
        if c.schedule == "simultaneous":
            return "both"
        k = self.epoch % (c.critic_phase + c.decoder_phase)
        return "critic" if k < c.critic_phase else "decoder"

    def finalize(self):
        """Load EMA shadows into the live parameters (when enabled)."""
        if self.config.use_ema:
            for p, s in zip(self.ema.params, self.ema.shadow):
                p.data[...] = s


def _apply(opt, direction, clip):
    grads = clip_grad_norm([p.grad for p in opt.params], clip)
    opt.step(grads, direction=direction)
    opt.zero_grad()


def _check_finite(*values):
    for v in values:
        if not np.isfinite(v):
            raise NonFiniteError(f"non-finite training loss: {values}")


def train_epoch(state, x, a, y):
    """One min-max update on the mini-batch ``(x, a, y)``; returns EpochStats."""
    cfg = state.config
    phase = state.phase()
    decoder_grad = phase in ("decoder", "both")
    batches = aug = None
    for attempt in range(2):
        aug = augment(x, a, y, state.decoder, cfg.n_aug, state.rng, with_grad=decoder_grad)
        try:
            batches = build_product_batches(aug, state.rng)
            break
        except ClassStarvationError as err:
            log.warning("epoch %d: %s (attempt %d)", state.epoch, err, attempt + 1)
    if batches is None:
        state.skipped += 1
        state.epoch += 1
        return EpochStats(state.epoch - 1, np.nan, np.nan, np.nan, float(aug.psi.data.mean()), phase, True)

    critics = state.G.parameters() + state.T.parameters()
    if phase == "critic":
        obj, cond, reg = objective_estimate(batches, state.G, state.T, cfg.div1, cfg.div2, cfg.beta)
        _check_finite(obj.item())
        (cond + reg).backward()
        _apply(state.opt_g, "ascent", cfg.clip_norm)
        _apply(state.opt_t, "ascent", cfg.clip_norm)
    elif phase == "decoder":
        with _Frozen(critics):
            obj, cond, reg = objective_estimate(batches, state.G, state.T, cfg.div1, cfg.div2, cfg.beta)
        _check_finite(obj.item())
        obj.backward()
        _apply(state.opt_theta, "descent", cfg.clip_norm)
    else:
        obj, cond, reg = objective_estimate(batches, state.G, state.T, cfg.div1, cfg.div2, cfg.beta)
        _check_finite(obj.item())
        obj.backward()
        for p in state.T.parameters():
            p.grad = None
        g_theta = clip_grad_norm([p.grad for p in state.opt_theta.params], cfg.clip_norm)
        g_g = clip_grad_norm([p.grad for p in state.opt_g.params], cfg.clip_norm)
        for p in state.decoder.parameters() + state.G.parameters():
            p.grad = None
        reg.backward()
        for p in state.decoder.parameters() + state.G.parameters():
            p.grad = None
        _apply(state.opt_t, "ascent", cfg.clip_norm)
        state.opt_theta.step(g_theta, "descent")
        state.opt_g.step(g_g, "ascent")

    state.ema.update()
    state.epoch += 1
    return EpochStats(state.epoch - 1, obj.item(), cond.item(), reg.item(),
                      float(aug.psi.data.mean()), phase)


@dataclass
class TrainResult:
    decoder: RewardDecoder
    G: VariationalCritic
    T: VariationalCritic
    history: list
    skipped: int
    config: TrainConfig


LOG_COLUMNS = ("epoch", "objective", "cmi", "reg", "decoded_return", "phase", "wall_time")


def train(dataset, config, log_path=None, state=None):
    """Run ``config.epochs`` mini-batch updates over ``dataset``."""
    if state is None:
        state = TrainState.create(dataset.x.shape[1], dataset.num_actions, dataset.y.shape[1], config)
    k = len(dataset)
    start = time.perf_counter()
    history = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        for _ in range(config.epochs):
            idx = state.rng.choice(k, size=min(config.batch_size, k), replace=False)
            stats = train_epoch(state, dataset.x[idx], dataset.a[idx], dataset.y[idx])
            history.append(stats)
            if writer is not None:
                writer.writerow([stats.epoch, stats.objective, stats.cmi, stats.reg,
                                 stats.decoded_return, stats.phase, time.perf_counter() - start])
    finally:
        if fh is not None:
            fh.close()
    state.finalize()
    return TrainResult(state.decoder, state.G, state.T, history, state.skipped, config)


# ---------------------------------------------------------------------------
# symmetry breaking and diagnostics
# ---------------------------------------------------------------------------

def behavior_decoded_return(decoder, dataset):
    """Decoded return of the logging policy: the mean decoded reward over the log."""
    return float(decoder.probs(dataset.x, dataset.a, dataset.y).mean())


def select_decoder(decoder, dataset, behavior=None):
    """Pick psi or 1 - psi so that the behaviour policy's decoded return is below 0.5."""
    value = behavior_decoded_return(decoder, dataset)
    if value == 0.5:
        log.warning("decoded return of the behaviour policy is exactly 0.5; keeping psi")
        return decoder
    return decoder if value < 0.5 else decoder.opposite()


def decoded_accuracy(decoder, dataset):
    """Fraction of logged rows where round(psi) equals the hidden reward."""
    psi = decoder.probs(dataset.x, dataset.a, dataset.y)
    return float(np.mean((psi > 0.5) == (dataset.reveal_rewards() == 1)))


def config_dict(config):
    return asdict(config)
