"""Command-line experiment runner.

Every flag can also be given in a flat ``key = value`` config file
(``--config``); keys are the flag names with dashes replaced by
underscores, list values are comma separated and ``#`` starts a comment.
Flags given on the command line override the file.

Per-repeat seeds are ``int.from_bytes(blake2b(payload, digest_size=8), "little")``
where ``payload`` is ``b"frameless-aloha"`` followed by the little-endian
unsigned 64-bit words ``(master_seed, n, alpha_index, repeat_index)``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .metrics import MetricReport, RunBatch, emit_report
from .protocol import DEFAULT_GAMMA, DEFAULT_K_IDLE, ProtocolParams, ProtocolTrace, UpdatePolicy, run_protocol
from .schedule import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    DEFAULT_COLLISION_PROB,
    DEFAULT_MAX_PROB,
    DEFAULT_N_MIN,
    DEFAULT_P0,
    InfeasibleScheduleError,
    ScheduleParams,
    collision_floor_p0,
)
from .sic import DEFAULT_DEGREE_CAP, SicMode

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2
SEED_TAG = b"frameless-aloha"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    n_values: list[int] = field(default_factory=lambda: [100, 1000, 10000])
    alpha_values: list[float] = field(default_factory=lambda: [DEFAULT_ALPHA])
    p0: float | str = DEFAULT_P0
    n_min: int = DEFAULT_N_MIN
    n_max: int = 10_000
    pc: float = DEFAULT_COLLISION_PROB
    k_idle: int = DEFAULT_K_IDLE
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    max_prob: float = DEFAULT_MAX_PROB
    update_policy: UpdatePolicy = UpdatePolicy.MID_ROUND
    sic_mode: SicMode = SicMode.BACKTRACK
    degree_cap: int = DEFAULT_DEGREE_CAP
    repeats: int = 5000
    master_seed: int = 0
    output_path: Path = Path("results")
    output_format: str = "csv"
    parallelism: int = 1
    save_traces: bool = False

    @property
    def resolved_p0(self) -> float:
        if self.p0 == "auto":
            return collision_floor_p0(self.n_min, self.pc)
        return float(self.p0)

    def protocol_params(self, alpha: float) -> ProtocolParams:
        schedule = ScheduleParams(
            p0=self.resolved_p0,
            alpha=alpha,
            beta=self.beta,
            n_min=self.n_min,
            target_collision_prob=self.pc,
            max_prob=self.max_prob,
        )
        return ProtocolParams(
            schedule=schedule,
            k_idle=self.k_idle,
            gamma=self.gamma,
            update_policy=self.update_policy,
            sic_mode=self.sic_mode,
            degree_cap=self.degree_cap,
            n_max_bound=self.n_max,
        )

    def manifest(self) -> dict:
        d = asdict(self)
        d["p0_requested"] = d.pop("p0")
        d["p0"] = self.resolved_p0
        d["update_policy"] = self.update_policy.value
        d["sic_mode"] = self.sic_mode.value
        d["output_path"] = str(self.output_path)
        return d


# flag name -> (config field, parser)
def _int_list(s):
    return [int(x) for x in str(s).split(",") if x.strip()]


def _float_list(s):
    return [float(x) for x in str(s).split(",") if x.strip()]


def _p0(s):
    return "auto" if str(s).strip() == "auto" else float(s)


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_KEYS = {
    "n": ("n_values", _int_list),
    "n_min": ("n_min", int),
    "n_max": ("n_max", int),
    "alpha": ("alpha_values", _float_list),
    "p0": ("p0", _p0),
    "pc": ("pc", float),
    "k_idle": ("k_idle", int),
    "beta": ("beta", float),
    "gamma": ("gamma", float),
    "max_prob": ("max_prob", float),
    "update_policy": ("update_policy", UpdatePolicy),
    "sic_mode": ("sic_mode", SicMode),
    "degree_cap": ("degree_cap", int),
    "repeats": ("repeats", int),
    "seed": ("master_seed", int),
    "out": ("output_path", Path),
    "format": ("output_format", str),
    "jobs": ("parallelism", int),
    "save_traces": ("save_traces", _bool),
}

_RANGES = {
    "n": "comma-separated positive integers no larger than n_max",
    "n_min": "integer >= 2",
    "n_max": "integer >= 1",
    "alpha": "comma-separated reals > 1",
    "p0": "probability in (0, 1] or 'auto'",
    "pc": "probability in (0, 1)",
    "k_idle": "integer >= 1",
    "beta": "real > 0",
    "gamma": "real in (0, 1)",
    "max_prob": "probability in (0.5, 1]",
    "update_policy": "one of per-round, mid-round, per-slot",
    "sic_mode": "one of backtrack, no-backtrack",
    "degree_cap": "integer >= 1",
    "repeats": "integer >= 1",
    "seed": "integer in [0, 2**64)",
    "format": "csv or json",
    "jobs": "integer >= 1",
}


def _bad(key, value):
    return ConfigError(f"invalid value {value!r} for '{key}': expected {_RANGES.get(key, 'a valid value')}")


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        out[key] = value
    return out


def _validate(cfg: ExperimentConfig) -> None:
    checks = [
        ("n", cfg.n_values, bool(cfg.n_values) and all(1 <= n <= cfg.n_max for n in cfg.n_values)),
        ("n_max", cfg.n_max, cfg.n_max >= 1),
        ("n_min", cfg.n_min, cfg.n_min >= 2),
        ("alpha", cfg.alpha_values, bool(cfg.alpha_values) and all(a > 1 for a in cfg.alpha_values)),
        ("p0", cfg.p0, cfg.p0 == "auto" or 0 < cfg.p0 <= 1),
        ("pc", cfg.pc, 0 < cfg.pc < 1),
        ("k_idle", cfg.k_idle, cfg.k_idle >= 1),
        ("beta", cfg.beta, cfg.beta > 0),
        ("gamma", cfg.gamma, 0 < cfg.gamma < 1),
        ("max_prob", cfg.max_prob, 0.5 < cfg.max_prob <= 1),
        ("degree_cap", cfg.degree_cap, cfg.degree_cap >= 1),
        ("repeats", cfg.repeats, cfg.repeats >= 1),
        ("seed", cfg.master_seed, 0 <= cfg.master_seed < 2**64),
        ("format", cfg.output_format, cfg.output_format in ("csv", "json")),
        ("jobs", cfg.parallelism, cfg.parallelism >= 1),
    ]
    for key, value, ok in checks:
        if not ok:
            raise _bad(key, value)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="frameless-aloha",
        description="Monte-Carlo runs of frameless ALOHA with joint user-count estimation and SIC.",
    )
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--n", help="true user counts, comma separated (default 100,1000,10000)")
    ap.add_argument("--n-min", help="smallest anticipated population, used by --p0 auto")
    ap.add_argument("--n-max", help="largest anticipated population")
    ap.add_argument("--alpha", help="initial-round decay factors, comma separated")
    ap.add_argument("--p0", help="first-slot access probability, or 'auto'")
    ap.add_argument("--pc", help="target first-slot collision probability for --p0 auto")
    ap.add_argument("--k-idle", help="consecutive idle slots that end the initial round")
    ap.add_argument("--beta", help="target expected slot degree in resolution rounds")
    ap.add_argument("--gamma", help="fraction of estimated contenders that ends a round")
    ap.add_argument("--max-prob", help="ceiling on the resolution-round access probability")
    ap.add_argument("--update-policy", help="per-round | mid-round | per-slot")
    ap.add_argument("--sic-mode", help="backtrack | no-backtrack")
    ap.add_argument("--degree-cap", help="largest slot degree usable by SIC")
    ap.add_argument("--repeats", help="runs per cell")
    ap.add_argument("--seed", help="master seed")
    ap.add_argument("--out", help="output directory (default ./results)")
    ap.add_argument("--format", help="csv | json")
    ap.add_argument("--jobs", help="worker processes")
    ap.add_argument("--save-traces", action="store_const", const="true", help="also write per-run summaries")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def parse_config(argv=None) -> ExperimentConfig:
    """Defaults, then config file, then flags. Raises ConfigError with the offending key."""
    args = build_parser().parse_args(argv)
    values = read_config_file(args.config) if args.config else {}
    for key in _KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = ExperimentConfig()
    for key, raw in values.items():
        name, conv = _KEYS[key]
        try:
            setattr(cfg, name, conv(raw))
        except (ValueError, TypeError):
            raise _bad(key, raw) from None
    _validate(cfg)
    try:
        cfg.p0 = cfg.resolved_p0 if cfg.p0 == "auto" else cfg.p0
    except InfeasibleScheduleError as exc:
        raise ConfigError(f"invalid combination for 'p0 = auto': {exc}") from None
    return cfg


def repeat_seed(master_seed: int, n: int, alpha_index: int, repeat_index: int) -> int:
    payload = SEED_TAG + struct.pack("<4Q", master_seed, n, alpha_index, repeat_index)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _run_one(job) -> ProtocolTrace:
    n, params, seed = job
    return run_protocol(n, params, seed)


def run_cell(cfg: ExperimentConfig, n: int, alpha_index: int, executor=None) -> RunBatch:
    params = cfg.protocol_params(cfg.alpha_values[alpha_index])
    jobs = [(n, params, repeat_seed(cfg.master_seed, n, alpha_index, i)) for i in range(cfg.repeats)]
    if executor is None:
        traces = [_run_one(j) for j in jobs]
    else:
        traces = list(executor.map(_run_one, jobs, chunksize=max(1, len(jobs) // (8 * cfg.parallelism))))
    return RunBatch(n_true=n, params=params, traces=traces, master_seed=cfg.master_seed)


def _trace_summary(t: ProtocolTrace) -> dict:
    return {
        "true_n": t.true_n,
        "total_slots": t.total_slots,
        "unresolved": t.unresolved,
        "final_estimate": float(f"{t.final_estimate:.9g}"),
        "safety_cap_hit": t.safety_cap_hit,
        "rounds": [
            [r.round_index, r.slots_used, r.resolved_in_round, float(f"{r.estimate_at_end:.9g}"),
             r.termination_reason.value]
            for r in t.rounds
        ],
    }


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run every (n, alpha) cell and write one report per cell plus ``manifest.json``."""
    out = Path(cfg.output_path)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    failed = False
    executor = ProcessPoolExecutor(cfg.parallelism) if cfg.parallelism > 1 else None
    try:
        for ai, alpha in enumerate(cfg.alpha_values):
            for n in cfg.n_values:
                name = f"n{n}_alpha{alpha:g}"
                entry = {"n": n, "alpha": alpha, "alpha_index": ai, "file": f"{name}.{cfg.output_format}"}
                try:
                    batch = run_cell(cfg, n, ai, executor)
                    report = MetricReport.from_batch(
                        batch, seed=repeat_seed(cfg.master_seed, n, ai, 2**64 - 1), alpha=alpha
                    )
                    (out / entry["file"]).write_bytes(emit_report(report, cfg.output_format))
                    if cfg.save_traces:
                        lines = [json.dumps(_trace_summary(t)) for t in batch.traces]
                        (out / f"{name}.traces.jsonl").write_text("\n".join(lines) + "\n")
                    entry["status"] = "ok"
                    log.info("cell %s: T=%.4f unresolved=%.4f", name, report.throughput, report.unresolved_rate)
                except Exception as exc:  # a failed cell must not stop the sweep
                    failed = True
                    entry["status"] = f"failed: {exc}"
                    log.error("cell %s failed: %s", name, exc)
                cells.append(entry)
    finally:
        if executor is not None:
            executor.shutdown()
    manifest = {
        "version": __version__,
        "config": cfg.manifest(),
        "seed_rule": "blake2b-64(b'frameless-aloha' + <4Q(master_seed, n, alpha_index, repeat_index))",
        "rng": "numpy PCG64 via SeedSequence(repeat_seed)",
        "cells": cells,
    }
    # neither field influences results; keep them out of the manifest bytes
    manifest["config"].pop("parallelism")
    manifest["config"].pop("output_path")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_RUN if failed else EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"p0 = {cfg.resolved_p0:.6g}", file=sys.stderr)
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
