"""Config-driven experiment front-end.

Reads a JSON config, runs every requested strategy on identical seeds,
partitions and client initializations (so differences isolate the
aggregation rule), writes one rounds CSV per strategy plus a summary JSON,
and prints a final comparison table.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields as dataclass_fields, replace
from pathlib import Path

import numpy as np

from .data import generate_blobs, partition, split_train_test
from .errors import ConfigError
from .federation import (STRATEGIES, FederationConfig, make_clients, run_round,
                         write_rounds_csv)
from .nn import LrSchedule, MicroConvNet, OptimizerState


@dataclass
class DataConfig:
    """Synthetic dataset and partition settings."""
    class_count: int = 10
    channels: int = 3
    height: int = 8
    width: int = 8
    samples_per_class: int = 200
    test_samples_per_class: int = 50
    partition: str = "dirichlet"
    dirichlet_beta: float = 0.5
    template_scale: float = 60.0
    noise_scale: float = 0.5
    replicate: bool = False

    def validate(self) -> "DataConfig":
        for key in ("class_count", "channels", "height", "width",
                    "samples_per_class", "test_samples_per_class"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.partition not in ("iid", "dirichlet"):
            raise ConfigError("partition", "must be 'iid' or 'dirichlet'")
        if self.dirichlet_beta <= 0:
            raise ConfigError("dirichlet_beta", "must be > 0")
        if self.template_scale <= 0:
            raise ConfigError("template_scale", "must be > 0")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale", "must be >= 0")
        return self


@dataclass
class ModelConfig:
    """Architecture knobs for the fixed conv/conv/pool/dense stack."""
    conv_channels: tuple[int, int] = (8, 16)
    kernel_size: int = 3

    def validate(self) -> "ModelConfig":
        if len(self.conv_channels) != 2 or min(self.conv_channels) < 1:
            raise ConfigError("conv_channels", "must be two positive channel counts")
        if self.kernel_size < 1:
            raise ConfigError("kernel_size", "must be >= 1")
        return self


@dataclass
class OptimizerConfig:
    """Optimizer kind, regularization and learning-rate schedule."""
    kind: str = "sgd"
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    scheduler: str = "none"
    scheduler_step_size: int = 25
    scheduler_decay: float = 0.5

    def validate(self) -> "OptimizerConfig":
        if self.kind not in ("sgd", "adam"):
            raise ConfigError("kind", "must be 'sgd' or 'adam'")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if not 0 < self.adam_beta1 < 1:
            raise ConfigError("adam_beta1", "must be in (0, 1)")
        if not 0 < self.adam_beta2 < 1:
            raise ConfigError("adam_beta2", "must be in (0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigError("adam_epsilon", "must be > 0")
        if self.scheduler not in ("none", "steplr"):
            raise ConfigError("scheduler", "must be 'none' or 'steplr'")
        if self.scheduler_step_size < 1:
            raise ConfigError("scheduler_step_size", "must be >= 1")
        if not 0 < self.scheduler_decay <= 1:
            raise ConfigError("scheduler_decay", "must be in (0, 1]")
        return self

    def to_state(self, learning_rate: float) -> OptimizerState:
        return OptimizerState(kind=self.kind, learning_rate=learning_rate,
                              weight_decay=self.weight_decay,
                              adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
                              adam_epsilon=self.adam_epsilon)

    def to_schedule(self) -> LrSchedule:
        return LrSchedule(kind=self.scheduler, step_size=self.scheduler_step_size,
                          decay=self.scheduler_decay)


@dataclass
class ExperimentConfig:
    """Everything one experiment run needs."""
    federation: FederationConfig = field(default_factory=FederationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output_dir: str = "runs"
    strategies: list[str] = field(default_factory=lambda: ["FedAvg", "FedERImproved"])

    def validate(self) -> "ExperimentConfig":
        for section_name, section in (("federation", self.federation), ("data", self.data),
                                      ("model", self.model), ("optimizer", self.optimizer)):
            try:
                section.validate()
            except ConfigError as err:
                raise ConfigError(f"{section_name}.{err.key}", err.reason) from None
        if not self.strategies:
            raise ConfigError("strategies", "must name at least one strategy")
        for strategy in self.strategies:
            if strategy not in STRATEGIES:
                raise ConfigError("strategies", f"unknown strategy {strategy!r}")
            try:
                replace(self.federation, strategy=strategy).validate()
            except ConfigError as err:
                raise ConfigError(f"federation.{err.key}",
                                  f"{err.reason} (strategy {strategy})") from None
        shrink = 2 * (self.model.kernel_size - 1)
        if self.data.height - shrink < 1 or self.data.width - shrink < 1:
            raise ConfigError("model.kernel_size",
                              f"two {self.model.kernel_size}x{self.model.kernel_size} valid "
                              f"convolutions do not fit {self.data.height}x{self.data.width} inputs")
        if not self.output_dir:
            raise ConfigError("output_dir", "must be non-empty")
        return self

    def to_dict(self) -> dict:
        def section_dict(obj):
            out = {}
            for f in dataclass_fields(obj):
                value = getattr(obj, f.name)
                out[f.name] = list(value) if isinstance(value, tuple) else value
            return out

        return {
            "federation": section_dict(self.federation),
            "data": section_dict(self.data),
            "model": section_dict(self.model),
            "optimizer": section_dict(self.optimizer),
            "output_dir": self.output_dir,
            "strategies": list(self.strategies),
        }


# ---------------------------------------------------------------------------
# parsing


def _coerce_bool(path, value):
    if isinstance(value, bool):
        return value
    raise ConfigError(path, f"expected true/false, got {value!r}")


def _coerce_int(path, value):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    return value


def _coerce_float(path, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    return float(value)


def _coerce_str(path, value):
    if not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    return value


def _coerce_str_list(path, value):
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(path, f"expected a list of strings, got {value!r}")
    return list(value)


def _coerce_int_pair(path, value):
    ok = (isinstance(value, list) and len(value) == 2
          and all(isinstance(v, int) and not isinstance(v, bool) for v in value))
    if not ok:
        raise ConfigError(path, f"expected a pair of integers, got {value!r}")
    return tuple(value)


_FEDERATION_FIELDS = {
    "clients": _coerce_int, "rounds": _coerce_int, "local_epochs": _coerce_int,
    "batch_size": _coerce_int, "learning_rate": _coerce_float, "strategy": _coerce_str,
    "er_floor": _coerce_float, "prox_mu": _coerce_float, "unfold_mode": _coerce_int,
    "noise_mode": _coerce_str, "seed": _coerce_int, "fedavg_uniform": _coerce_bool,
    "dense_own_er": _coerce_bool,
}
_DATA_FIELDS = {
    "class_count": _coerce_int, "channels": _coerce_int, "height": _coerce_int,
    "width": _coerce_int, "samples_per_class": _coerce_int,
    "test_samples_per_class": _coerce_int, "partition": _coerce_str,
    "dirichlet_beta": _coerce_float, "template_scale": _coerce_float,
    "noise_scale": _coerce_float, "replicate": _coerce_bool,
}
_MODEL_FIELDS = {"conv_channels": _coerce_int_pair, "kernel_size": _coerce_int}
_OPTIMIZER_FIELDS = {
    "kind": _coerce_str, "weight_decay": _coerce_float, "adam_beta1": _coerce_float,
    "adam_beta2": _coerce_float, "adam_epsilon": _coerce_float, "scheduler": _coerce_str,
    "scheduler_step_size": _coerce_int, "scheduler_decay": _coerce_float,
}
_SECTIONS = {
    "federation": (FederationConfig, _FEDERATION_FIELDS),
    "data": (DataConfig, _DATA_FIELDS),
    "model": (ModelConfig, _MODEL_FIELDS),
    "optimizer": (OptimizerConfig, _OPTIMIZER_FIELDS),
}


def _parse_section(name: str, raw, factory, field_table):
    if not isinstance(raw, dict):
        raise ConfigError(name, f"expected an object, got {raw!r}")
    kwargs = {}
    for key, value in raw.items():
        if key not in field_table:
            raise ConfigError(f"{name}.{key}", "unknown key")
        kwargs[key] = field_table[key](f"{name}.{key}", value)
    return factory(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON experiment config; absent keys take documented defaults.

    Raises ConfigError naming the offending key on unknown keys, type
    mismatches and constraint violations.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError("<config>", f"invalid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<config>", "top level must be a JSON object")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            factory, table = _SECTIONS[key]
            kwargs[key] = _parse_section(key, value, factory, table)
        elif key == "output_dir":
            kwargs[key] = _coerce_str("output_dir", value)
        elif key == "strategies":
            kwargs[key] = _coerce_str_list("strategies", value)
        else:
            raise ConfigError(key, "unknown key")
    return ExperimentConfig(**kwargs).validate()


# ---------------------------------------------------------------------------
# running


def run_experiment(cfg: ExperimentConfig, quiet: bool = False) -> dict:
    """Run every configured strategy on identical data and initializations.

    Writes ``rounds_<strategy>.csv`` per strategy plus ``summary.json`` to
    the output directory and returns the summary dict. Reruns with the same
    config produce byte-identical CSVs apart from the wall-time column.
    """
    cfg.validate()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fed = cfg.federation
    data_cfg = cfg.data

    full = generate_blobs(
        fed.seed, data_cfg.class_count, data_cfg.channels, data_cfg.height,
        data_cfg.width, data_cfg.samples_per_class + data_cfg.test_samples_per_class,
        template_scale=data_cfg.template_scale, noise_scale=data_cfg.noise_scale)
    train, test = split_train_test(full, data_cfg.test_samples_per_class)
    if data_cfg.replicate:
        # every client holds a full copy of the training split
        shards = [train] * fed.clients
    else:
        plan = partition(train, fed.clients, data_cfg.partition, fed.seed,
                         data_cfg.dirichlet_beta)
        shards = [train.subset(ix) for ix in plan.client_indices]

    model = MicroConvNet(in_channels=data_cfg.channels, classes=data_cfg.class_count,
                         conv_channels=cfg.model.conv_channels,
                         kernel_size=cfg.model.kernel_size)
    schedule = cfg.optimizer.to_schedule()
    optimizer_template = cfg.optimizer.to_state(fed.learning_rate)

    per_strategy = {}
    for strategy in cfg.strategies:
        run_cfg = replace(fed, strategy=strategy)
        clients = make_clients(model, shards, optimizer_template, fed.seed)
        server = None  # round 1 trains from each client's own seeded init
        reports = []
        for round_index in range(1, run_cfg.rounds + 1):
            server, report = run_round(server, clients, test, model, run_cfg,
                                       round_index, schedule)
            reports.append(report)
            if not quiet:
                mean_loss = float(np.mean(list(report.train_loss.values())))
                print(f"[{strategy}] round {round_index}/{run_cfg.rounds} "
                      f"train_loss={mean_loss:.4f} test_acc={report.test_acc:.4f}")
        csv_path = out_dir / f"rounds_{strategy}.csv"
        write_rounds_csv(csv_path, reports)
        per_strategy[strategy] = {
            "final_test_accuracy": reports[-1].test_acc,
            "final_test_loss": reports[-1].test_loss,
            "final_mean_train_loss": float(np.mean(list(reports[-1].train_loss.values()))),
            "rounds": run_cfg.rounds,
            "csv": csv_path.name,
        }

    baseline = "FedAvg" if "FedAvg" in per_strategy else cfg.strategies[0]
    differences = {
        name: entry["final_test_accuracy"] - per_strategy[baseline]["final_test_accuracy"]
        for name, entry in per_strategy.items() if name != baseline
    }
    summary = {
        "baseline": baseline,
        "strategies": per_strategy,
        "differences": differences,
        "config": cfg.to_dict(),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _print_table(summary: dict) -> None:
    print()
    print(f"{'strategy':<16} {'top-1 acc':>10} {'diff':>10}")
    print("-" * 38)
    for name, entry in summary["strategies"].items():
        if name == summary["baseline"]:
            diff = "baseline"
        else:
            diff = f"{summary['differences'][name]:+.4f}"
        print(f"{name:<16} {entry['final_test_accuracy']:>10.4f} {diff:>10}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="feder",
        description="Compare federated aggregation strategies on synthetic data.")
    parser.add_argument("config", help="path to a JSON experiment config ('{}' runs the defaults)")
    parser.add_argument("--strategy", choices=STRATEGIES,
                        help="run only this strategy instead of the configured list")
    parser.add_argument("--seed", type=int, help="override federation.seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text()
    except OSError as err:
        print(f"error: cannot read config: {err}", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(text)
        if args.strategy:
            cfg.strategies = [args.strategy]
        if args.seed is not None:
            cfg.federation = replace(cfg.federation, seed=args.seed)
        if args.out:
            cfg.output_dir = args.out
        summary = run_experiment(cfg, quiet=args.quiet)
    except (ConfigError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    if not args.quiet:
        _print_table(summary)
    return 0
