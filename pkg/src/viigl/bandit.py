"""Offline contextual-bandit oracle driven by a decoded reward.

The oracle regresses per-action scores onto the decoded reward of the logged
action, weighting each row by the inverse propensity of that action, and acts
greedily on the scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .nn import BranchNet, Mlp
from .optim import Optimizer, clip_grad_norm
from .tensor import Tensor


@dataclass
class PolicyConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 600
    hidden: int = 64
    image_hidden: int = 0
    clip_norm: float = 1.0
    seed: int = 0


class LinearPolicy:
    """Greedy policy over a score network; ties go to the lowest action index."""

    def __init__(self, net, num_actions):
        self.net = net
        self.num_actions = num_actions

    @classmethod
    def create(cls, context_dim, num_actions, rng, hidden=64, image_hidden=0):
        if image_hidden:
            net = BranchNet([(context_dim, image_hidden)], num_actions, rng)
        else:
            net = Mlp([context_dim, hidden, num_actions], rng)
        return cls(net, num_actions)

    def scores(self, contexts):
        return self.net(np.asarray(contexts, dtype=np.float64)).data

    def act(self, contexts):
        return np.argmax(self.scores(contexts), axis=1)

    def parameters(self):
        return self.net.parameters()


class ScaledPolicy:
    """Scores of ``base`` multiplied by a constant (argmax invariance checks)."""

    def __init__(self, base, scale):
        self.base, self.scale = base, scale

    def scores(self, contexts):
        return self.scale * self.base.scores(contexts)

    def act(self, contexts):
        return np.argmax(self.scores(contexts), axis=1)


def _propensities(dataset):
    prop = np.asarray(dataset.propensity, dtype=np.float64)
    if np.any(prop <= 0):
        raise ContractError("logged propensities must be positive for inverse weighting")
    return prop


def train_policy(dataset, decoder, behavior=None, config=None):
    """Fit action scores to IPS-weighted decoded rewards and return the greedy policy.

    ``decoder`` is any object with ``probs(x, a, y)``; ``behavior`` is accepted for
    symmetry with the pipeline but the logged propensities are what is used.
    """
    config = config or PolicyConfig()
    weights = 1.0 / _propensities(dataset)
    targets = decoder.probs(dataset.x, dataset.a, dataset.y)
    rng = np.random.default_rng([config.seed, 2])
    policy = LinearPolicy.create(dataset.x.shape[1], dataset.num_actions, rng,
                                 config.hidden, config.image_hidden)
    opt = Optimizer(policy.parameters(), "adam", config.lr)
    k = len(dataset)
    rows = np.arange(min(config.batch_size, k))
    for _ in range(config.epochs):
        order = rng.permutation(k)
        for start in range(0, k, config.batch_size):
            idx = order[start:start + config.batch_size]
            scores = policy.net(dataset.x[idx])
            picked = scores[rows[:len(idx)], dataset.a[idx]]
            w = weights[idx] / weights[idx].sum()
            loss = (((picked - Tensor(targets[idx])) ** 2) * w).sum()
            loss.backward()
            grads = clip_grad_norm([p.grad for p in opt.params], config.clip_norm)
            opt.step(grads, "descent")
            opt.zero_grad()
    return policy


def decoded_return(policy, dataset, decoder):
    """IPS estimate of the decoded return of ``policy`` from the log."""
    match = policy.act(dataset.x) == dataset.a
    if not np.any(match):
        return 0.0
    psi = decoder.probs(dataset.x, dataset.a, dataset.y)
    return float(np.mean(match * psi / _propensities(dataset)))


@dataclass
class PolicyReport:
    accuracy: float
    true_return: float
    decoded_return: float = float("nan")
    n: int = 0

    @property
    def stderr(self):
        if self.n < 2:
            return float("nan")
        return float(np.sqrt(self.accuracy * (1 - self.accuracy) / self.n))


def evaluate(policy, test_contexts, test_labels, dataset=None, decoder=None):
    """Accuracy on held-out contexts; equals the true return when r = 1[a = l_x]."""
    labels = np.asarray(test_labels)
    acc = float(np.mean(policy.act(test_contexts) == labels)) if len(labels) else 0.0
    dec = decoded_return(policy, dataset, decoder) if dataset is not None and decoder is not None else float("nan")
    return PolicyReport(acc, acc, dec, len(labels))
