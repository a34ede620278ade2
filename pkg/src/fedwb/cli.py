"""Command-line entry point: experiment configuration and orchestration.

Subcommands:

- ``mnist``       federated MNIST classification (rounds.csv, speedup.csv)
- ``cartpole``    federated CartPole DQN (durations*.csv, wb_vs_avg_diff.csv)
- ``ot-selftest`` closed-form-vs-LP oracle sweeps for transport and barycenters

Settings come from an optional YAML config file (sections ``mnist``,
``cartpole``, ``ot``, plus top-level ``output_dir`` and ``seed``); command
line flags win over the file. ``FEDWB_SEED`` overrides the seed unless a
``--seed`` flag is given explicitly. A copy of the fully resolved
configuration is written next to the outputs. Identical configuration and
seed produce byte-identical CSV files, except the wall-clock ``phase_ms``
column of rounds.csv.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import DomainError
from .federated import (
    FedConfig,
    build_speedup_table,
    epochs_to_target,
    run_federated,
    write_rounds_csv,
    write_speedup_csv,
)
from .fusion import FusionWeights, fuse_layer_wb, normalize_layer
from .mnist_data import load_mnist, split_stratified
from .nn import Loss, SgdConfig
from .ot import (
    BarycenterWeights,
    DiscreteDistribution,
    GroundCost,
    barycenter_lp,
    barycenter_quantile,
    solve_ot_lp,
    wasserstein_distance,
)
from .rl import (
    DqnConfig,
    EnvParams,
    run_hfrl,
    write_difference_csv,
    write_durations_csv,
    write_moving_average_csv,
)

DEFAULT_SEED = 0
DEFAULT_OUTPUT_DIR = "out"

CONFIG_SECTIONS = {"mnist", "cartpole", "ot", "output_dir", "seed"}
MNIST_KEYS = {"agents", "epochs", "method", "batch_size", "learning_rate",
              "batches_per_round", "target", "stop_at_target", "hidden_units",
              "workers", "data_dir", "projection", "fusion_p"}
CARTPOLE_KEYS = {"agents", "episodes", "methods", "pole_half_lengths", "gamma",
                 "eps_start", "eps_end", "eps_decay", "sync_every",
                 "replay_capacity", "batch_size", "learning_rate", "max_steps",
                 "loss", "hidden_units", "projection", "fusion_p"}
OT_KEYS = {"sizes", "trials", "p"}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise DomainError(f"cannot read config file: {exc}")
    if not isinstance(doc, dict):
        raise DomainError("config file must be a mapping of sections")
    unknown = set(doc) - CONFIG_SECTIONS
    if unknown:
        raise DomainError(f"unknown config keys: {sorted(unknown)}")
    for section, allowed in (("mnist", MNIST_KEYS), ("cartpole", CARTPOLE_KEYS),
                             ("ot", OT_KEYS)):
        sub = doc.get(section) or {}
        if not isinstance(sub, dict):
            raise DomainError(f"config section {section!r} must be a mapping")
        bad = set(sub) - allowed
        if bad:
            raise DomainError(f"unknown keys in config section {section!r}: {sorted(bad)}")
    return doc


def _resolve(args, file_config: dict, section: str, key: str, default):
    """Priority: explicit flag > config file > environment-independent default."""
    flag_value = getattr(args, key, None)
    if flag_value is not None:
        return flag_value
    sub = file_config.get(section) or {}
    if key in sub:
        return sub[key]
    return default


def _resolve_seed(args, file_config: dict) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FEDWB_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise DomainError(f"FEDWB_SEED must be an integer, got {env!r}")
    return int(file_config.get("seed", DEFAULT_SEED))


def _resolve_output_dir(args, file_config: dict) -> Path:
    out = args.output_dir or file_config.get("output_dir") or DEFAULT_OUTPUT_DIR
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved_config(path: Path, resolved: dict) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True)


def _print_outputs(mapping: dict) -> None:
    print("outputs:")
    for name, description in mapping.items():
        print(f"  {name}: {description}")


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in str(text).split(",") if tok != ""]


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in str(text).split(",") if tok != ""]


# ---------------------------------------------------------------------------
# mnist
# ---------------------------------------------------------------------------


def cmd_mnist(args, file_config: dict) -> int:
    seed = _resolve_seed(args, file_config)
    out_dir = _resolve_output_dir(args, file_config)
    agent_counts = _int_list(_resolve(args, file_config, "mnist", "agents", "1"))
    epochs = int(_resolve(args, file_config, "mnist", "epochs", 25))
    method = str(_resolve(args, file_config, "mnist", "method", "wb")).lower()
    batch_size = int(_resolve(args, file_config, "mnist", "batch_size", 1))
    lr = float(_resolve(args, file_config, "mnist", "learning_rate", 0.01))
    target = float(_resolve(args, file_config, "mnist", "target", 0.90))
    stop = bool(_resolve(args, file_config, "mnist", "stop_at_target", False))
    hidden = int(_resolve(args, file_config, "mnist", "hidden_units", 256))
    workers = int(_resolve(args, file_config, "mnist", "workers", os.cpu_count() or 1))
    batches = _resolve(args, file_config, "mnist", "batches_per_round", None)
    projection = str(_resolve(args, file_config, "mnist", "projection", "round"))
    fusion_p = int(_resolve(args, file_config, "mnist", "fusion_p", 1))
    data_dir = _resolve(args, file_config, "mnist", "data_dir", "data/mnist")

    if not agent_counts or any(d < 1 for d in agent_counts):
        raise DomainError(f"agent counts must be positive, got {agent_counts}")

    try:
        data = load_mnist(data_dir)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load MNIST from {data_dir!r}: {exc}", file=sys.stderr)
        return 1

    resolved = {
        "seed": seed, "output_dir": str(out_dir),
        "mnist": {"agents": agent_counts, "epochs": epochs, "method": method,
                  "batch_size": batch_size, "learning_rate": lr, "target": target,
                  "stop_at_target": stop, "hidden_units": hidden, "workers": workers,
                  "batches_per_round": batches, "projection": projection,
                  "fusion_p": fusion_p, "data_dir": str(data_dir)},
    }
    _write_resolved_config(out_dir / "resolved_config.yaml", resolved)

    outputs = {str(out_dir / "resolved_config.yaml"): "resolved run configuration"}
    epoch_counts: dict[int, int | None] = {}
    for agents in agent_counts:
        split = split_stratified(data, agents, seed)
        config = FedConfig(
            agents=agents, epochs=epochs, method=method,
            batches_per_round=None if batches is None else int(batches),
            sgd=SgdConfig(learning_rate=lr, batch_size=batch_size), seed=seed,
            accuracy_target=target, stop_at_target=stop, hidden_units=hidden,
            cost=GroundCost(fusion_p), projection=projection, workers=workers)
        metrics = run_federated(config, split)
        reached = epochs_to_target(metrics, target)
        epoch_counts[agents] = reached
        name = "rounds.csv" if len(agent_counts) == 1 else f"rounds_agents{agents}.csv"
        write_rounds_csv(out_dir / name, metrics)
        outputs[str(out_dir / name)] = (
            f"per-round global/local test accuracy, {agents} agent(s)")
        reached_text = "never" if reached is None else f"epoch {reached}"
        print(f"agents={agents}: final accuracy {metrics[-1].global_acc:.4f}, "
              f"target {target:.2f} reached: {reached_text}")

    if epoch_counts.get(1) is not None:
        rows = build_speedup_table(epoch_counts)
        write_speedup_csv(out_dir / "speedup.csv", rows)
        outputs[str(out_dir / "speedup.csv")] = (
            "epochs-to-target and normalized time fraction per agent count")
    elif 1 in epoch_counts:
        print("note: 1-agent run never reached the target; speedup.csv skipped")
    else:
        print("note: no 1-agent baseline run; speedup.csv skipped")

    _print_outputs(outputs)
    return 0


# ---------------------------------------------------------------------------
# cartpole
# ---------------------------------------------------------------------------


def cmd_cartpole(args, file_config: dict) -> int:
    seed = _resolve_seed(args, file_config)
    out_dir = _resolve_output_dir(args, file_config)
    agents = int(_resolve(args, file_config, "cartpole", "agents", 3))
    episodes = int(_resolve(args, file_config, "cartpole", "episodes", 600))
    methods_text = str(_resolve(args, file_config, "cartpole", "methods", "wb"))
    methods = [m.strip().lower() for m in methods_text.split(",") if m.strip()]
    half_lengths = _resolve(args, file_config, "cartpole", "pole_half_lengths", None)
    if half_lengths is None:
        half_lengths = ([0.5] if agents == 1
                        else list(np.linspace(0.25, 0.75, agents)))
    elif isinstance(half_lengths, str):
        half_lengths = _float_list(half_lengths)
    if len(half_lengths) != agents:
        raise DomainError(f"{len(half_lengths)} pole lengths for {agents} agents")

    loss_name = str(_resolve(args, file_config, "cartpole", "loss", "huber")).lower()
    loss = {"huber": Loss.HUBER, "squared_error": Loss.SQUARED_ERROR}.get(loss_name)
    if loss is None:
        raise DomainError(f"loss must be 'huber' or 'squared_error', got {loss_name!r}")

    config = DqnConfig(
        gamma=float(_resolve(args, file_config, "cartpole", "gamma", 0.95)),
        eps_start=float(_resolve(args, file_config, "cartpole", "eps_start", 0.9)),
        eps_end=float(_resolve(args, file_config, "cartpole", "eps_end", 0.05)),
        eps_decay=float(_resolve(args, file_config, "cartpole", "eps_decay", 1000.0)),
        sync_every=int(_resolve(args, file_config, "cartpole", "sync_every", 500)),
        replay_capacity=int(_resolve(args, file_config, "cartpole",
                                     "replay_capacity", 10000)),
        batch_size=int(_resolve(args, file_config, "cartpole", "batch_size", 64)),
        learning_rate=float(_resolve(args, file_config, "cartpole",
                                     "learning_rate", 0.05)),
        episodes=episodes,
        max_steps=int(_resolve(args, file_config, "cartpole", "max_steps", 500)),
        loss=loss,
        hidden_units=int(_resolve(args, file_config, "cartpole", "hidden_units", 256)),
    )
    projection = str(_resolve(args, file_config, "cartpole", "projection", "round"))
    fusion_p = int(_resolve(args, file_config, "cartpole", "fusion_p", 1))
    for m in methods:
        if m not in ("wb", "avg"):
            raise DomainError(f"methods must be wb and/or avg, got {m!r}")
    if not methods:
        raise DomainError("need at least one method")

    resolved = {
        "seed": seed, "output_dir": str(out_dir),
        "cartpole": {"agents": agents, "episodes": episodes, "methods": methods,
                     "pole_half_lengths": [float(h) for h in half_lengths],
                     "gamma": config.gamma, "eps_start": config.eps_start,
                     "eps_end": config.eps_end, "eps_decay": config.eps_decay,
                     "sync_every": config.sync_every,
                     "replay_capacity": config.replay_capacity,
                     "batch_size": config.batch_size,
                     "learning_rate": config.learning_rate,
                     "max_steps": config.max_steps, "loss": loss_name,
                     "hidden_units": config.hidden_units, "projection": projection,
                     "fusion_p": fusion_p},
    }
    _write_resolved_config(out_dir / "resolved_config.yaml", resolved)

    env_params = [EnvParams(half_length=float(h)) for h in half_lengths]
    outputs = {str(out_dir / "resolved_config.yaml"): "resolved run configuration"}
    results = {}
    for method in methods:
        results[method] = run_hfrl(env_params, config, method=method, seed=seed,
                                   cost=GroundCost(fusion_p), projection=projection)
        suffix = "" if len(methods) == 1 else f"_{method}"
        durations_name = f"durations{suffix}.csv"
        ma_name = f"durations_ma50{suffix}.csv"
        write_durations_csv(out_dir / durations_name, results[method])
        write_moving_average_csv(out_dir / ma_name, results[method])
        outputs[str(out_dir / durations_name)] = (
            f"episode durations per agent ({method})")
        outputs[str(out_dir / ma_name)] = (
            f"50-episode moving average of durations ({method})")
        mean_last = results[method].durations[:, -50:].mean()
        print(f"method={method}: best duration {results[method].durations.max()}, "
              f"mean of final 50 episodes {mean_last:.1f}")

    if "wb" in results and "avg" in results:
        write_difference_csv(out_dir / "wb_vs_avg_diff.csv",
                             results["wb"], results["avg"])
        outputs[str(out_dir / "wb_vs_avg_diff.csv")] = (
            "per-episode duration gap between the two aggregation methods")

    _print_outputs(outputs)
    return 0


# ---------------------------------------------------------------------------
# ot-selftest
# ---------------------------------------------------------------------------


def cmd_ot_selftest(args, file_config: dict) -> int:
    seed = _resolve_seed(args, file_config)
    sizes = _int_list(_resolve(args, file_config, "ot", "sizes", "4,8,16"))
    trials = int(_resolve(args, file_config, "ot", "trials", 50))
    p_text = str(_resolve(args, file_config, "ot", "p", "both"))
    exponents = [1, 2] if p_text == "both" else [int(p_text)]
    if any(p not in (1, 2) for p in exponents):
        raise DomainError(f"p must be 1, 2 or 'both', got {p_text!r}")
    if any(n < 2 or n > 64 for n in sizes):
        raise DomainError("sizes must lie in 2..64")

    rng = np.random.default_rng(seed)
    failures = []

    def random_dist(n):
        m = rng.random(n) + 1e-3
        return DiscreteDistribution(m / m.sum())

    for p in exponents:
        cost = GroundCost(p)
        worst = 0.0
        for n in sizes:
            for _ in range(trials):
                a, b = random_dist(n), random_dist(n)
                _, lp_obj = solve_ot_lp(a, b, cost)
                closed = wasserstein_distance(a, b, cost) ** p
                worst = max(worst, abs(closed - lp_obj))
        status = "ok" if worst <= 1e-6 else "FAIL"
        print(f"distance vs LP oracle  p={p} sizes={sizes} trials={trials}: "
              f"max |gap| {worst:.2e} [{status}]")
        if status == "FAIL":
            failures.append(f"distance oracle gap {worst:.2e} (p={p})")

    worst_tv = 0.0
    for n in (s for s in sizes if s <= 16):
        for _ in range(trials):
            s_count = int(rng.integers(1, 5))
            inputs = [random_dist(n) for _ in range(s_count)]
            lam = BarycenterWeights(rng.dirichlet(np.ones(s_count)))
            ours = barycenter_quantile(inputs, lam, GroundCost(2))
            oracle = barycenter_lp(inputs, lam, GroundCost(2))
            worst_tv = max(worst_tv, 0.5 * float(np.abs(ours.mass - oracle.mass).sum()))
    status = "ok" if worst_tv <= 1e-6 else "FAIL"
    print(f"barycenter vs LP oracle p=2: max TV {worst_tv:.2e} [{status}]")
    if status == "FAIL":
        failures.append(f"barycenter oracle TV {worst_tv:.2e}")

    # Fusion round trip at scale: one-layer fixed point.
    layer = rng.standard_normal(4096)
    fused = fuse_layer_wb([layer, layer.copy()], BarycenterWeights.uniform(2),
                          GroundCost(2), "round")
    err = float(np.abs(fused - layer).max())
    status = "ok" if err <= 1e-8 else "FAIL"
    print(f"fusion fixed point (2 identical agents, 4096 weights): "
          f"max |err| {err:.2e} [{status}]")
    if status == "FAIL":
        failures.append(f"fusion fixed point err {err:.2e}")

    if failures:
        print("self-test FAILED:")
        for f in failures:
            print(f"  - {f}")
        return 1
    print("self-test passed")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _agent_list(text: str) -> str:
    values = _int_list(text)
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"agent counts must be positive, got {text}")
    return text


def _pole_list(text: str) -> str:
    values = _float_list(text)
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError(f"pole half-lengths must be positive, got {text}")
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedwb",
        description="Federated learning experiments fusing models with "
                    "1D Wasserstein barycenters (with an averaging baseline).")
    parser.add_argument("--config", help="YAML config file (flags win over it)")
    parser.add_argument("--seed", type=int,
                        help=f"master RNG seed (FEDWB_SEED env var also honored; "
                             f"default {DEFAULT_SEED})")
    parser.add_argument("--output-dir", help=f"directory for CSV outputs "
                                             f"(default {DEFAULT_OUTPUT_DIR!r})")
    sub = parser.add_subparsers(dest="command", required=True)

    p_mnist = sub.add_parser("mnist", help="federated MNIST classification")
    p_mnist.add_argument("--agents", type=_agent_list,
                         help="agent count, or comma list for the speedup grid "
                              "(default 1)")
    p_mnist.add_argument("--epochs", type=_positive_int, help="rounds to train (default 25)")
    p_mnist.add_argument("--method", choices=("wb", "avg", "none"),
                         help="aggregation method (default wb)")
    p_mnist.add_argument("--batch-size", dest="batch_size", type=_positive_int,
                         help="SGD batch size (default 1: pure SGD)")
    p_mnist.add_argument("--learning-rate", dest="learning_rate", type=float,
                         help="SGD learning rate (default 0.01)")
    p_mnist.add_argument("--batches-per-round", dest="batches_per_round",
                         type=_positive_int,
                         help="local batches per round (default: one shard pass)")
    p_mnist.add_argument("--target", type=float,
                         help="accuracy target for epochs-to-target (default 0.90)")
    p_mnist.add_argument("--stop-at-target", dest="stop_at_target",
                         action="store_const", const=True,
                         help="stop each run once the target is reached")
    p_mnist.add_argument("--hidden-units", dest="hidden_units", type=_positive_int,
                         help="hidden layer width (default 256)")
    p_mnist.add_argument("--workers", type=_positive_int,
                         help="process workers for local training (default: cores)")
    p_mnist.add_argument("--projection", choices=("round", "interp"),
                         help="barycenter grid projection (default round)")
    p_mnist.add_argument("--fusion-p", dest="fusion_p", type=int, choices=(1, 2),
                         help="fusion transport-cost exponent (default 1)")
    p_mnist.add_argument("--data-dir", dest="data_dir",
                         help="directory with the four IDX files (default data/mnist)")

    p_cart = sub.add_parser("cartpole", help="federated CartPole DQN")
    p_cart.add_argument("--agents", type=_positive_int, help="agent count (default 3)")
    p_cart.add_argument("--episodes", type=_positive_int,
                        help="episodes per agent (default 600)")
    p_cart.add_argument("--methods", help="comma list of wb,avg (default wb)")
    p_cart.add_argument("--pole-half-lengths", dest="pole_half_lengths", type=_pole_list,
                        help="comma list of per-agent pole half-lengths "
                             "(default 0.25,0.5,0.75)")
    p_cart.add_argument("--gamma", type=float, help="discount factor (default 0.95)")
    p_cart.add_argument("--eps-start", dest="eps_start", type=float)
    p_cart.add_argument("--eps-end", dest="eps_end", type=float)
    p_cart.add_argument("--eps-decay", dest="eps_decay", type=float)
    p_cart.add_argument("--sync-every", dest="sync_every", type=_positive_int,
                        help="global steps between aggregations (default 500)")
    p_cart.add_argument("--replay-capacity", dest="replay_capacity", type=_positive_int)
    p_cart.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p_cart.add_argument("--learning-rate", dest="learning_rate", type=float)
    p_cart.add_argument("--max-steps", dest="max_steps", type=_positive_int)
    p_cart.add_argument("--loss", choices=("huber", "squared_error"))
    p_cart.add_argument("--hidden-units", dest="hidden_units", type=_positive_int)
    p_cart.add_argument("--projection", choices=("round", "interp"))
    p_cart.add_argument("--fusion-p", dest="fusion_p", type=int, choices=(1, 2),
                        help="fusion transport-cost exponent (default 1)")

    p_ot = sub.add_parser("ot-selftest", help="closed-form vs LP oracle sweeps")
    p_ot.add_argument("--sizes", help="comma list of support sizes (default 4,8,16)")
    p_ot.add_argument("--trials", type=_positive_int,
                      help="random instances per size (default 50)")
    p_ot.add_argument("--p", dest="p", choices=("1", "2", "both"),
                      help="cost exponent(s) to test (default both)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_config = _load_config(args.config)
        if args.command == "mnist":
            return cmd_mnist(args, file_config)
        if args.command == "cartpole":
            return cmd_cartpole(args, file_config)
        return cmd_ot_selftest(args, file_config)
    except DomainError as exc:
        parser.error(str(exc))            # exits with status 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
