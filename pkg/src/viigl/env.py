"""Number-guessing environments with latent binary reward and noisy feedback.

A round draws a context ``x`` with label ``l_x``, the behaviour policy picks
``a``, and the hidden reward is ``r = 1[a == l_x]``.  The learner only sees a
feedback vector: normally a random example of "digit" ``r``; with probability
``p`` it is replaced according to the noise type:

==== =============================================
I    letter "t" if r == 1 else letter "f"
A    digit (a + 6r - 3) mod 10
C    digit (l_x + 6r - 3) mod 10
CA   digit (l_x + a + 6r - 3) mod 10
==== =============================================
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .oracle import DiscreteJoint

NOISE_TYPES = ("none", "I", "A", "C", "CA")
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SYNTHETIC_JITTER = 0.05
EMNIST_T, EMNIST_F = 20, 6   # EMNIST-Letters labels are 1-based: a=1 ... z=26


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path):
    """Parse an IDX file (uint8 payload) into an ndarray of its stated shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(raw))
    zero, dtype_code, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or dtype_code != 0x08 or ndim not in (1, 3):
        (magic,) = struct.unpack_from(">I", raw, 0)
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimension header", offset=len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise FormatError(f"{path}: expected {need} payload bytes, found {len(raw) - header}",
                          offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(image_path, label_path):
    """Images flattened and scaled to [0, 1], plus integer labels."""
    images = read_idx(image_path)
    labels = read_idx(label_path)
    if images.ndim != 3:
        raise FormatError(f"{image_path}: expected magic 0x{IMAGE_MAGIC:08x} (3-D images)", offset=0)
    if labels.ndim != 1:
        raise FormatError(f"{label_path}: expected magic 0x{LABEL_MAGIC:08x} (labels)", offset=0)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", offset=4)
    flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return flat, labels.astype(np.int64)


def write_idx(path, array):
    """Write a uint8 array as IDX (used for fixtures and exports)."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def _find(directory, stems):
    for stem in stems:
        for suffix in ("", ".gz"):
            path = os.path.join(directory, stem + suffix)
            if os.path.exists(path):
                return path
    raise FileNotFoundError(f"none of {stems} found in {directory}")


def load_mnist(directory, split="train"):
    prefix = "train" if split == "train" else "t10k"
    return load_idx(
        _find(directory, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"]),
        _find(directory, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"]),
    )


def load_emnist_letters(directory):
    """Return (f_images, t_images) from the EMNIST-Letters training split."""
    images, labels = load_idx(
        _find(directory, ["emnist-letters-train-images-idx3-ubyte"]),
        _find(directory, ["emnist-letters-train-labels-idx1-ubyte"]),
    )
    # EMNIST stores images transposed relative to MNIST
    images = images.reshape(-1, 28, 28).transpose(0, 2, 1).reshape(len(images), -1)
    return images[labels == EMNIST_F], images[labels == EMNIST_T]


def letter_stand_ins(rng, count=64, side=28):
    """Noisy glyph images for "f" and "t" when EMNIST is unavailable."""
    t = np.zeros((side, side))
    t[5:8, 6:22] = 1.0
    t[5:23, 12:16] = 1.0
    f = np.zeros((side, side))
    f[5:23, 8:12] = 1.0
    f[5:8, 8:21] = 1.0
    f[12:15, 8:18] = 1.0
    out = []
    for glyph in (f, t):
        noise = rng.uniform(0.0, 0.3, size=(count, side * side))
        out.append(np.clip(glyph.reshape(1, -1) * 0.9 + noise, 0.0, 1.0))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# feedback logic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeedbackSpec:
    noise_type: str = "none"
    noise_level: float = 0.0

    def __post_init__(self):
        if self.noise_type not in NOISE_TYPES:
            raise ConfigError(f"unknown noise type {self.noise_type!r}; expected one of {NOISE_TYPES}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError(f"noise level must lie in [0, 1], got {self.noise_level}")

    @property
    def effective_level(self):
        return 0.0 if self.noise_type == "none" else self.noise_level


def feedback_class(noise_type, noisy, label, action, reward, num_digits):
    """Class index of the feedback example: digits 0..D-1, then "f" = D, "t" = D+1.

    Works elementwise on arrays.
    """
    label, action, reward = (np.asarray(v, dtype=np.int64) for v in (label, action, reward))
    noisy = np.asarray(noisy, dtype=bool) & (noise_type != "none")
    if noise_type in ("none",):
        alt = reward
    elif noise_type == "I":
        alt = num_digits + reward
    elif noise_type == "A":
        alt = (action + 6 * reward - 3) % num_digits
    elif noise_type == "C":
        alt = (label + 6 * reward - 3) % num_digits
    elif noise_type == "CA":
        alt = (label + action + 6 * reward - 3) % num_digits
    else:
        raise ConfigError(f"unknown noise type {noise_type!r}")
    return np.where(noisy, alt, reward)


@dataclass(frozen=True)
class Sample:
    """What the learner observes from one interaction."""

    x: np.ndarray
    a: int
    y: np.ndarray


class Env:
    """Shared step/collect logic; subclasses provide contexts and feedback pools."""

    num_actions: int
    num_digits: int
    spec: FeedbackSpec

    @property
    def num_contexts(self):
        return len(self.context_labels)

    @property
    def context_dim(self):
        return self.contexts.shape[1]

    @property
    def feedback_dim(self):
        raise NotImplementedError

    def draw_feedback(self, classes, rng):
        raise NotImplementedError

    def _check_actions(self, actions):
        actions = np.asarray(actions, dtype=np.int64)
        if np.any(actions < 0) or np.any(actions >= self.num_actions):
            raise ContractError(f"actions must lie in 0..{self.num_actions - 1}")
        return actions

    def step(self, context_index, action, rng):
        """One round: returns (hidden reward, feedback vector)."""
        action = int(self._check_actions(action))
        label = int(self.context_labels[context_index])
        reward = int(action == label)
        noisy = rng.random() < self.spec.effective_level
        cls = feedback_class(self.spec.noise_type, noisy, label, action, reward, self.num_digits)
        return reward, self.draw_feedback(np.atleast_1d(cls), rng)[0]

    def step_batch(self, context_index, actions, rng):
        actions = self._check_actions(actions)
        labels = self.context_labels[context_index]
        rewards = (actions == labels).astype(np.int64)
        noisy = rng.random(len(actions)) < self.spec.effective_level
        classes = feedback_class(self.spec.noise_type, noisy, labels, actions, rewards, self.num_digits)
        return rewards, self.draw_feedback(classes, rng), noisy


class SyntheticEnv(Env):
    """Finite stand-in for the MNIST task.

    Contexts are one-hot vectors with label ``x mod num_actions``.  Each
    feedback class (``num_actions`` digits plus letters "f" and "t") has a
    fixed prototype vector; draws add Gaussian jitter.
    """

    def __init__(self, num_contexts, num_actions, feedback_dim, spec=None, seed=0,
                 jitter=SYNTHETIC_JITTER):
        if min(num_contexts, num_actions, feedback_dim) < 2:
            raise ConfigError("synthetic env needs at least 2 contexts, actions and feedback dims")
        self.spec = spec or FeedbackSpec()
        self.num_actions = int(num_actions)
        self.num_digits = int(num_actions)
        self.contexts = np.eye(num_contexts)
        self.context_labels = np.arange(num_contexts) % num_actions
        proto_rng = np.random.default_rng(seed)
        self.prototypes = proto_rng.uniform(0.0, 1.0, size=(self.num_digits + 2, feedback_dim))
        self.jitter = jitter

    @property
    def feedback_dim(self):
        return self.prototypes.shape[1]

    @property
    def num_feedback_classes(self):
        return len(self.prototypes)

    def draw_feedback(self, classes, rng):
        classes = np.asarray(classes, dtype=np.int64)
        return self.prototypes[classes] + rng.normal(0.0, self.jitter, size=(len(classes), self.feedback_dim))

    def enumerate_joint(self, behavior=None):
        """Exact p[x, a, r, feedback_class] under ``behavior`` (uniform by default)."""
        nx, na, ny = self.num_contexts, self.num_actions, self.num_feedback_classes
        probs = np.full((nx, na), 1.0 / na) if behavior is None else behavior.probabilities(self.contexts)
        p = np.zeros((nx, na, 2, ny))
        level = self.spec.effective_level
        for x in range(nx):
            label = self.context_labels[x]
            for a in range(na):
                r = int(a == label)
                mass = probs[x, a] / nx
                clean = int(feedback_class(self.spec.noise_type, False, label, a, r, self.num_digits))
                noisy = int(feedback_class(self.spec.noise_type, True, label, a, r, self.num_digits))
                p[x, a, r, clean] += mass * (1.0 - level)
                p[x, a, r, noisy] += mass * level
        return DiscreteJoint(p)

    def test_contexts(self, n, rng):
        idx = rng.integers(0, self.num_contexts, size=n)
        return self.contexts[idx], self.context_labels[idx]


class MnistEnv(Env):
    """MNIST contexts with MNIST-digit (or letter) feedback images."""

    def __init__(self, images, labels, spec=None, letters=None, test_images=None, test_labels=None,
                 seed=0):
        self.spec = spec or FeedbackSpec()
        self.num_actions = 10
        self.num_digits = 10
        self.contexts = np.asarray(images, dtype=np.float64)
        self.context_labels = np.asarray(labels, dtype=np.int64)
        self.pools = [self.contexts[self.context_labels == d] for d in range(10)]
        if letters is None:
            letters = letter_stand_ins(np.random.default_rng(seed))
        self.pools.extend(letters)
        self.test_images = test_images
        self.test_labels = test_labels

    @classmethod
    def from_directory(cls, mnist_dir, spec=None, emnist_dir=None, seed=0):
        images, labels = load_mnist(mnist_dir, "train")
        try:
            test_images, test_labels = load_mnist(mnist_dir, "test")
        except FileNotFoundError:
            test_images = test_labels = None
        letters = load_emnist_letters(emnist_dir) if emnist_dir else None
        return cls(images, labels, spec, letters, test_images, test_labels, seed)

    @property
    def feedback_dim(self):
        return self.contexts.shape[1]

    def draw_feedback(self, classes, rng):
        classes = np.asarray(classes, dtype=np.int64)
        out = np.empty((len(classes), self.feedback_dim))
        for cls in np.unique(classes):
            rows = np.flatnonzero(classes == cls)
            pool = self.pools[cls]
            out[rows] = pool[rng.integers(0, len(pool), size=len(rows))]
        return out

    def test_contexts(self, n, rng):
        if self.test_images is None:
            raise FileNotFoundError("MNIST test split (t10k files) not loaded")
        idx = rng.choice(len(self.test_images), size=min(n, len(self.test_images)), replace=False)
        return self.test_images[idx], self.test_labels[idx]


# ---------------------------------------------------------------------------
# behaviour policies and offline datasets
# ---------------------------------------------------------------------------

class UniformPolicy:
    def __init__(self, num_actions):
        self.num_actions = num_actions

    def probabilities(self, contexts):
        return np.full((len(contexts), self.num_actions), 1.0 / self.num_actions)

    def sample(self, contexts, rng):
        return rng.integers(0, self.num_actions, size=len(contexts))

    def propensity(self, contexts, actions):
        return np.full(len(actions), 1.0 / self.num_actions)


@dataclass
class Dataset:
    """Logged interactions.  True rewards sit behind :meth:`reveal_rewards`."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    propensity: np.ndarray
    num_actions: int
    meta: dict = field(default_factory=dict)
    _r_true: np.ndarray = field(default=None, repr=False)
    _labels: np.ndarray = field(default=None, repr=False)
    noisy_fraction: float = None

    def __len__(self):
        return len(self.a)

    def __getitem__(self, i):
        return Sample(self.x[i], int(self.a[i]), self.y[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, index):
        return Dataset(self.x[index], self.a[index], self.y[index], self.propensity[index],
                       self.num_actions, dict(self.meta),
                       None if self._r_true is None else self._r_true[index],
                       None if self._labels is None else self._labels[index])

    def reveal_rewards(self):
        """Evaluation-only access to the latent rewards."""
        if self._r_true is None:
            raise ContractError("dataset carries no ground-truth rewards")
        return self._r_true

    def reveal_labels(self):
        if self._labels is None:
            raise ContractError("dataset carries no context labels")
        return self._labels

    def save_csv(self, path):
        header = " ".join(f"{k}={v}" for k, v in {
            "K": len(self), "x_dim": self.x.shape[1], "y_dim": self.y.shape[1],
            "num_actions": self.num_actions, **self.meta}.items())
        r = np.zeros(len(self)) if self._r_true is None else self._r_true
        rows = np.column_stack([self.x, self.a, self.y, r, self.propensity])
        np.savetxt(path, rows, delimiter=",", header=header, fmt="%.17g")

    @classmethod
    def load_csv(cls, path):
        with open(path) as fh:
            first = fh.readline().lstrip("#").strip()
        meta = dict(item.split("=", 1) for item in first.split())
        rows = np.loadtxt(path, delimiter=",", ndmin=2)
        dx, dy = int(meta.pop("x_dim")), int(meta.pop("y_dim"))
        k = int(meta.pop("K"))
        num_actions = int(meta.pop("num_actions"))
        if rows.shape != (k, dx + dy + 3):
            raise FormatError(f"{path}: expected {k} rows of {dx + dy + 3} columns, got {rows.shape}")
        x = rows[:, :dx]
        a = rows[:, dx].astype(np.int64)
        y = rows[:, dx + 1:dx + 1 + dy]
        return cls(x, a, y, rows[:, -1], num_actions, meta, rows[:, -2].astype(np.int64))


def collect(env, policy, K, seed):
    """K i.i.d. rounds: uniform context, action from ``policy``, feedback from ``env``."""
    if K < 1:
        raise ContractError(f"K must be at least 1, got {K}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, env.num_contexts, size=K)
    contexts = env.contexts[idx]
    actions = policy.sample(contexts, rng)
    rewards, feedback, noisy = env.step_batch(idx, actions, rng)
    meta = {"behavior": type(policy).__name__, "seed": seed,
            "noise": env.spec.noise_type, "noise_level": env.spec.noise_level}
    return Dataset(contexts, actions, feedback, policy.propensity(contexts, actions), env.num_actions,
                   meta, rewards, env.context_labels[idx], float(noisy.mean()))


def make_synthetic_env(num_contexts, num_actions, feedback_dim, noise_spec=None, seed=0):
    return SyntheticEnv(num_contexts, num_actions, feedback_dim, noise_spec, seed)
