"""Command-line experiment driver.

Verbs: ``collect``, ``train``, ``eval``, ``run``, ``sweep`` and ``oracle-check``.
Settings come from built-in defaults, then an optional ``--config`` file of
``key=value`` lines, then explicit flags (highest precedence).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from multiprocessing import Pool

import numpy as np

from . import bandit, env as envmod, trainer
from .errors import ConfigError, NonFiniteError, ViiglError
from .nn import assign_params, load_params, save_params

log = logging.getLogger(__name__)

TRIAL_COLUMNS = ("run_id", "trial", "seed", "noise_type", "noise_level", "beta", "f1", "f2",
                 "input_mode", "accuracy", "std_err", "decoded_return", "status", "summary",
                 "n_excluded")
SWEEP_AXES = {
    "beta": ["0", "10"],
    "noise_level": ["0.1", "0.2", "0.3"],
    "f_pair": ["kl-kl", "chi2-chi2", "chi2-kl"],
    "input_mode": ["y", "xay"],
}


@dataclass
class RunConfig:
    env: str = "synthetic"
    mnist: str = None
    emnist: str = None
    noise: str = "none"
    noise_level: float = 0.0
    beta: float = 10.0
    f1: str = "kl"
    f2: str = "kl"
    input_mode: str = "y"
    dv_form: str = "nwj"
    trials: int = 16
    seed: int = 0
    epochs: int = 1000
    batch: int = 600
    lr: float = 1e-3
    hidden: int = 64
    image_hidden: int = 0
    samples: int = 3000
    contexts: int = 10
    actions: int = 10
    feedback_dim: int = 8
    jitter: float = envmod.SYNTHETIC_JITTER
    policy_epochs: int = 50
    test_size: int = 2000
    workers: int = 1
    out: str = "runs"
    run_id: str = None

    def __post_init__(self):
        if self.env not in ("synthetic", "mnist"):
            raise ConfigError(f"--env must be 'synthetic' or 'mnist', got {self.env!r}")
        if self.trials < 1:
            raise ConfigError(f"--trials must be at least 1, got {self.trials}")
        if self.env == "mnist" and not self.mnist:
            raise ConfigError("--env mnist needs --mnist <dir>")
        envmod.FeedbackSpec(self.noise, self.noise_level)
        self.train_config()

    def spec(self):
        return envmod.FeedbackSpec(self.noise, self.noise_level)

    def train_config(self, seed=0):
        return trainer.TrainConfig(beta=self.beta, f1=self.f1, f2=self.f2, dv_form=self.dv_form,
                                   lr=self.lr, epochs=self.epochs, batch_size=self.batch, seed=seed,
                                   input_mode=self.input_mode, hidden=self.hidden,
                                   image_hidden=self.image_hidden)

    def policy_config(self, seed=0):
        return bandit.PolicyConfig(epochs=self.policy_epochs, lr=self.lr, batch_size=self.batch,
                                   hidden=self.hidden, image_hidden=self.image_hidden, seed=seed)


def _coerce(name, value):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown setting {name!r}")
    if value is None or kinds[name] == "str":
        return value
    try:
        return {"int": int, "float": float}[kinds[name]](value)
    except ValueError:
        raise ConfigError(f"setting {name!r} expects {kinds[name]}, got {value!r}") from None


def read_config_file(path):
    """Flat ``key=value`` lines; ``#`` starts a comment; dashes in keys are allowed."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.lstrip("-").replace("-", "_")
            out[key] = _coerce(key, value)
    return out


def write_config_file(path, config):
    with open(path, "w") as fh:
        for key, value in asdict(config).items():
            if value is not None:
                fh.write(f"{key}={value}\n")


def trial_seed(master, i):
    """Independent 32-bit seed for trial ``i`` derived from the master seed."""
    return int(np.random.SeedSequence([master, i]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------

def _check_path(path, what):
    if path and not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def build_env(config, seed):
    if config.env == "mnist":
        _check_path(config.mnist, "MNIST directory")
        _check_path(config.emnist, "EMNIST directory")
        return envmod.MnistEnv.from_directory(config.mnist, config.spec(), config.emnist, seed)
    return envmod.SyntheticEnv(config.contexts, config.actions, config.feedback_dim, config.spec(),
                               seed=seed, jitter=config.jitter)


def run_trial(config, i, log_dir=None):
    """collect -> train decoder -> select -> train policy -> evaluate; returns a CSV row."""
    seed = trial_seed(config.seed, i)
    row = dict(run_id=config.run_id or "run", trial=i, seed=seed, noise_type=config.noise,
               noise_level=config.noise_level, beta=config.beta, f1=config.f1, f2=config.f2,
               input_mode=config.input_mode, accuracy="", std_err="", decoded_return="",
               status="ok", summary=0, n_excluded="")
    streams = np.random.SeedSequence([config.seed, i]).spawn(3)
    env_seed, data_seed, test_seed = (int(s.generate_state(1)[0]) for s in streams)
    env = build_env(config, env_seed)
    data = envmod.collect(env, envmod.UniformPolicy(env.num_actions), config.samples, data_seed)
    log_path = os.path.join(log_dir, f"trial_{i:03d}.csv") if log_dir else None
    try:
        result = trainer.train(data, config.train_config(seed), log_path=log_path)
        decoder = trainer.select_decoder(result.decoder, data)
        policy = bandit.train_policy(data, decoder, config=config.policy_config(seed))
    except NonFiniteError as err:
        log.warning("trial %d failed: %s", i, err)
        row["status"] = "failed"
        return row
    xs, labels = env.test_contexts(config.test_size, np.random.default_rng(test_seed))
    report = bandit.evaluate(policy, xs, labels, data, decoder)
    row.update(accuracy=report.accuracy, std_err=report.stderr, decoded_return=report.decoded_return)
    return row


def _trial_job(args):
    return run_trial(*args)


def summarize(rows, run_id):
    ok = [r["accuracy"] for r in rows if r["status"] == "ok"]
    first = rows[0]
    return dict(run_id=run_id, trial="", seed="", noise_type=first["noise_type"],
                noise_level=first["noise_level"], beta=first["beta"], f1=first["f1"], f2=first["f2"],
                input_mode=first["input_mode"],
                accuracy=float(np.mean(ok)) if ok else math.nan,
                std_err=float(np.std(ok)) if ok else math.nan,
                decoded_return="", status="summary", summary=1, n_excluded=len(rows) - len(ok))


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRIAL_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def run(config):
    """All trials of one configuration; writes trials.csv, summary.csv and logs/."""
    if config.env == "mnist":
        _check_path(config.mnist, "MNIST directory")
        _check_path(config.emnist, "EMNIST directory")
    run_id = config.run_id or time.strftime("run-%Y%m%d-%H%M%S")
    config = replace(config, run_id=run_id)
    os.makedirs(config.out, exist_ok=True)
    log_dir = os.path.join(config.out, "logs")
    os.makedirs(log_dir, exist_ok=True)
    write_config_file(os.path.join(config.out, "config.txt"), config)
    jobs = [(config, i, log_dir) for i in range(config.trials)]
    if config.workers > 1:
        with Pool(config.workers) as pool:
            rows = pool.map(_trial_job, jobs)
    else:
        rows = [run_trial(*job) for job in jobs]
    summary = summarize(rows, run_id)
    _write_rows(os.path.join(config.out, "trials.csv"), rows + [summary])
    _write_rows(os.path.join(config.out, "summary.csv"), [summary])
    return rows, summary


def sweep_overrides(axis, value):
    if axis == "f_pair":
        pair = value.split("-")
        if len(pair) != 2:
            raise ConfigError(f"f_pair values look like 'kl-chi2', got {value!r}")
        return dict(f1=pair[0], f2=pair[1])
    if axis == "beta":
        return dict(beta=float(value))
    if axis == "noise_level":
        return dict(noise_level=float(value))
    if axis == "input_mode":
        return dict(input_mode=value.lower())
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")


def sweep(config, axis, values=None):
    """One run per axis value; writes sweep.csv with one row per value."""
    values = list(values or SWEEP_AXES.get(axis, []))
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigError("sweep needs at least one axis value")
    table = []
    base_id = config.run_id or "sweep"
    for value in values:
        sub = replace(config, out=os.path.join(config.out, f"{axis}={value}"),
                      run_id=f"{base_id}-{axis}={value}", **sweep_overrides(axis, value))
        sub.__post_init__()
        _, summary = run(sub)
        table.append({"axis": axis, "value": value, "mean": summary["accuracy"],
                      "std": summary["std_err"], "trials": config.trials,
                      "n_excluded": summary["n_excluded"]})
    os.makedirs(config.out, exist_ok=True)
    with open(os.path.join(config.out, "sweep.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(table[0]))
        writer.writeheader()
        writer.writerows(table)
    return table


def oracle_check(out=None):
    """Quick exactness checks of the information-theoretic reference code."""
    from . import oracle

    out = out or sys.stdout
    rng = np.random.default_rng(0)
    checks = []
    bsc = 0.5 * np.array([[0.9, 0.1], [0.1, 0.9]])
    checks.append(("binary symmetric mi",
                   abs(oracle.exact_f_mi(bsc) - (math.log(2) + 0.9 * math.log(0.9) + 0.1 * math.log(0.1))) < 1e-9))
    indep = np.outer(rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4)))
    checks.append(("independent mi", max(oracle.exact_f_mi(indep, f) for f in ("kl", "chi2")) < 1e-12))
    worst = 0.0
    for _ in range(20):
        lhs, rhs = oracle.chain_rule_terms(rng.dirichlet(np.ones(24)).reshape(3, 4, 2))
        worst = max(worst, abs(lhs - rhs))
    checks.append(("chain rule", worst < 1e-9))
    env = envmod.SyntheticEnv(4, 2, 3)
    res = oracle.grid_minimize_objective(env.enumerate_joint(), beta=1.0, resolution=3)
    checks.append(("realizable grid minimum", res.cmi <= 1e-6))
    ok = True
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'} {name}", file=out)
        ok &= passed
    return ok


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--env", choices=["mnist", "synthetic"])
    p.add_argument("--mnist", help="directory with MNIST IDX files")
    p.add_argument("--emnist", help="directory with EMNIST-Letters IDX files")
    p.add_argument("--noise", choices=list(envmod.NOISE_TYPES))
    p.add_argument("--noise-level", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--f1", choices=["kl", "chi2"])
    p.add_argument("--f2", choices=["kl", "chi2"])
    p.add_argument("--input-mode", choices=["y", "xay"])
    p.add_argument("--dv-form", choices=["nwj", "paper"])
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--image-hidden", type=int)
    p.add_argument("--samples", type=int, help="logged interactions per trial")
    p.add_argument("--contexts", type=int)
    p.add_argument("--actions", type=int)
    p.add_argument("--feedback-dim", type=int)
    p.add_argument("--jitter", type=float)
    p.add_argument("--policy-epochs", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--run-id")
    p.add_argument("--out")


def build_parser():
    parser = argparse.ArgumentParser(prog="viigl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, help_text in [("collect", "log a dataset under the uniform behaviour policy"),
                            ("train", "train a reward decoder on a logged dataset"),
                            ("eval", "select the decoder, train and evaluate a policy"),
                            ("run", "full pipeline over several trials"),
                            ("sweep", "one run per value of a sweep axis")]:
        p = sub.add_parser(verb, help=help_text)
        _add_common(p)
        if verb in ("train", "eval"):
            p.add_argument("--data", required=True, help="dataset CSV from `collect`")
        if verb == "eval":
            p.add_argument("--decoder", required=True, help="decoder checkpoint from `train`")
        if verb == "sweep":
            p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
            p.add_argument("--values", help="comma-separated axis values")
    sub.add_parser("oracle-check", help="exactness checks of the reference computations")
    return parser


def resolve_config(args):
    settings = {}
    if getattr(args, "config", None):
        _check_path(args.config, "config file")
        settings.update(read_config_file(args.config))
    names = {f.name for f in fields(RunConfig)}
    for key, value in vars(args).items():
        if key in names and value is not None:
            settings[key] = value
    return RunConfig(**settings)


def _cmd_collect(config):
    env = build_env(config, config.seed)
    data = envmod.collect(env, envmod.UniformPolicy(env.num_actions), config.samples, config.seed)
    data.meta.update(env=config.env)
    data.save_csv(config.out)
    print(f"wrote {len(data)} rows to {config.out}")


def _load_data(path):
    _check_path(path, "dataset")
    return envmod.Dataset.load_csv(path)


def _cmd_train(config, data_path):
    data = _load_data(data_path)
    result = trainer.train(data, config.train_config(config.seed), log_path=config.out + ".log.csv")
    save_params(config.out, result.decoder.parameters())
    print(f"wrote decoder to {config.out} ({result.skipped} skipped batches)")


def _cmd_eval(config, data_path, decoder_path):
    data = _load_data(data_path)
    _check_path(decoder_path, "decoder checkpoint")
    tc = config.train_config(config.seed)
    decoder, _, _ = trainer.make_models(data.x.shape[1], data.num_actions, data.y.shape[1], tc,
                                        np.random.default_rng(0))
    assign_params(decoder.parameters(), load_params(decoder_path))
    decoder = trainer.select_decoder(decoder, data)
    policy = bandit.train_policy(data, decoder, config=config.policy_config(config.seed))
    env = build_env(config, config.seed)
    xs, labels = env.test_contexts(config.test_size, np.random.default_rng([config.seed, 3]))
    report = bandit.evaluate(policy, xs, labels, data, decoder)
    row = dict(run_id=config.run_id or "eval", trial=0, seed=config.seed, noise_type=config.noise,
               noise_level=config.noise_level, beta=config.beta, f1=config.f1, f2=config.f2,
               input_mode=config.input_mode, accuracy=report.accuracy, std_err=report.stderr,
               decoded_return=report.decoded_return, status="ok", summary=0, n_excluded="")
    writer = csv.DictWriter(sys.stdout, fieldnames=TRIAL_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerow(row)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "oracle-check":
            return 0 if oracle_check() else 1
        config = resolve_config(args)
        if args.verb == "collect":
            _cmd_collect(config)
        elif args.verb == "train":
            _cmd_train(config, args.data)
        elif args.verb == "eval":
            _cmd_eval(config, args.data, args.decoder)
        elif args.verb == "run":
            _, summary = run(config)
            print(f"accuracy {summary['accuracy']:.4f} +- {summary['std_err']:.4f} "
                  f"({summary['n_excluded']} excluded); results in {config.out}")
        elif args.verb == "sweep":
            values = args.values.split(",") if args.values else None
            for row in sweep(config, args.axis, values):
                print(f"{row['axis']}={row['value']}: {row['mean']:.4f} +- {row['std']:.4f}")
    except (ViiglError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
