"""Command line entry point: ``geofed {run,compare,gradcheck,protocheck}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__, checks
from .fedcore import ExperimentConfig, MetricsLog, Strategy, run_experiment, threads_from_env
from .segmodel import save_checkpoint

log = logging.getLogger("geofed")


class ConfigError(ValueError):
    pass


def _schema() -> dict[str, tuple]:
    hints = typing.get_type_hints(ExperimentConfig)
    out = {}
    for f in dataclasses.fields(ExperimentConfig):
        t = hints[f.name]
        if t is bool:
            out[f.name] = ("bool",)
        elif t is int:
            out[f.name] = ("int",)
        elif t is float:
            out[f.name] = ("float",)
        elif f.name == "strategy":
            out[f.name] = ("strategy",)
        else:
            out[f.name] = ("list",)
    return out


def _coerce(key: str, kind: str, value, where: str):
    bad = ConfigError(f"{where}: key {key!r} expects {kind}, got {value!r}")
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if kind == "strategy":
        try:
            return Strategy(str(value).lower())
        except ValueError:
            raise ConfigError(f"{where}: key 'strategy' must be one of "
                              f"{[s.value for s in Strategy]}, got {value!r}") from None
    if not isinstance(value, list):
        raise bad
    return tuple(value)


def config_from_mapping(data: dict, where: str = "<config>") -> ExperimentConfig:
    """Validate a flat key-value mapping; missing keys take their defaults."""
    schema = _schema()
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"{where}: nested table {key!r} is not allowed")
        if key not in schema:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kwargs[key] = _coerce(key, schema[key][0], value, where)
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_mapping(data, str(path))


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    version: str
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _effective_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for key, attr in (("seed", "seed"), ("rounds", "rounds"), ("institutions", "institutions")):
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "strategy", None):
        overrides["strategy"] = Strategy(args.strategy)
    overrides["threads"] = threads_from_env(cfg.threads)
    return dataclasses.replace(cfg, **overrides)


def comparison_table(logs: list[MetricsLog]) -> dict[str, dict[str, float]]:
    table = {}
    for lg in logs:
        f = lg.final
        row = {f"inst_{i}": v for i, v in enumerate(f.per_institution)}
        row["Average"] = f.average
        row["Global"] = f.global_miou
        table[lg.strategy] = row
    return table


def table_csv(table: dict[str, dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(next(iter(table.values())))
    w.writerow(["strategy"] + cols)
    for name, row in table.items():
        w.writerow([name] + [f"{100 * row[c]:.2f}" for c in cols])
    return buf.getvalue()


def cmd_run(args) -> int:
    from .plotting import plot_rounds

    cfg = _effective_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash(cfg), cfg.seed, __version__, _now(), config=cfg.to_dict())
    result = run_experiment(cfg)
    (out / "metrics.csv").write_text(result.to_csv())
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2))
    meta, blob = save_checkpoint(result.final_params, out / "global_model")
    plot_rounds([result], out / "rounds.png", title=f"{cfg.strategy.value}, seed {cfg.seed}")
    manifest.outputs = ["metrics.csv", "summary.json", meta.name, blob.name, "rounds.png"]
    manifest.finished = _now()
    manifest.write(out)
    f = result.final
    print(f"{cfg.strategy.value}: average {100 * f.average:.2f}  global {100 * f.global_miou:.2f}")
    return 0


def cmd_compare(args) -> int:
    from .plotting import plot_rounds, plot_table

    base = _effective_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash(base), base.seed, __version__, _now(), config=base.to_dict())
    logs = [run_experiment(dataclasses.replace(base, strategy=s))
            for s in (Strategy.GEOFED, Strategy.FEDAVG, Strategy.LOCAL_ONLY, Strategy.CENTRALIZED)]
    table = comparison_table(logs)
    (out / "comparison.csv").write_text(table_csv(table))
    rounds_csv = logs[0].to_csv() + "".join(lg.to_csv().split("\n", 1)[1] for lg in logs[1:])
    (out / "rounds.csv").write_text(rounds_csv)
    (out / "summary.json").write_text(json.dumps({lg.strategy: lg.summary() for lg in logs},
                                                 indent=2))
    plot_rounds(logs, out / "rounds.png", title=f"seed {base.seed}")
    plot_table(table, out / "comparison.png")
    manifest.outputs = ["comparison.csv", "rounds.csv", "summary.json", "rounds.png",
                        "comparison.png"]
    manifest.finished = _now()
    manifest.write(out)
    sys.stdout.write(table_csv(table))
    return 0


def cmd_gradcheck(args) -> int:
    results = checks.gradient_suite(range(args.seeds))
    ok = True
    for name, err in results.items():
        passed = err < checks.GRAD_TOL
        ok &= passed
        print(f"{name:14s} max rel error {err:.3e}  {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_protocheck(args) -> int:
    results = checks.protocol_suite(args.cases)
    for name, passed in results.items():
        print(f"{name:18s} {'ok' if passed else 'FAIL'}")
    return 0 if all(results.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geofed", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run one strategy"),
                           ("compare", "run all four strategies on identical data")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="flat TOML file with ExperimentConfig keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", default=f"out/{name}")
        p.add_argument("--rounds", type=int)
        p.add_argument("--institutions", type=int)
        if name == "run":
            p.add_argument("--strategy", choices=[s.value for s in Strategy])
    g = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    g.add_argument("--seeds", type=int, default=20)
    pc = sub.add_parser("protocheck", help="secure-sum and aggregation oracle checks")
    pc.add_argument("--cases", type=int, default=100)
    return parser


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "gradcheck": cmd_gradcheck,
            "protocheck": cmd_protocheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
