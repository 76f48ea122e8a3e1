"""Experiment harness: config -> world -> run -> files.

Each run writes into a content-addressed directory (a hash of the resolved
config names it), so repeating a finished cell is a no-op. Per-round
per-client records go to ``rounds.jsonl``; together with the echoed config
and ``run_meta.json`` these files are byte-identical across re-runs of the
same resolved config. Wall-clock timings live in a separate
``timing.json`` precisely so that everything else can stay deterministic.
"""

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as datahub
from . import metrics, nn, protocol
from .config import SCHEMA, ExperimentConfig, _deep_merge, _nest, _walk_keys, echo_config
from .errors import ConfigError

# Stream tags keep every consumer of the experiment seed independent.
_S_BLOBS, _S_TEST, _S_PUBLIC, _S_PARTITION, _S_RATES, _S_NOISE, _S_INIT, _S_TRAIN, _S_SAMPLER = range(1, 10)

ROUNDS_FILE = "rounds.jsonl"
CONFIG_FILE = "resolved_config.json"
META_FILE = "run_meta.json"
TIMING_FILE = "timing.json"
DONE_FILE = "DONE"

GRID_ALIASES = {
    "strategy": "strategy",
    "noise_type": "data.noise.kind",
    "mu": "data.noise.rate",
    "seed": "seed",
    "flags": "flags",
}


@dataclass
class World:
    clients: list[protocol.ClientState]
    public: datahub.Dataset | None
    test: datahub.Dataset
    noise_rates: list[float]
    archs: list[tuple[tuple[int, int], ...]]


def random_noise_assignment(k: int, lo: float, hi: float, seed) -> np.ndarray:
    """Per-client noise rates drawn uniformly from [lo, hi]."""
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigError(f"invalid noise range [{lo}, {hi}]")
    rng = np.random.default_rng(seed)
    return lo + (hi - lo) * rng.random(k)


def _base_dataset(cfg: ExperimentConfig) -> datahub.Dataset:
    d = cfg.data
    if d.source == "blobs":
        return datahub.gen_blobs(d.classes, d.dims, d.per_class, d.spread, (cfg.seed, _S_BLOBS))
    if d.source == "idx":
        if not d.idx_images or not d.idx_labels:
            raise ConfigError("idx source needs data.idx_images and data.idx_labels")
        return datahub.load_idx(d.idx_images, d.idx_labels)
    if not d.csv_path:
        raise ConfigError("csv source needs data.csv_path")
    return datahub.load_csv(d.csv_path, datahub.CsvSchema(d.classes))


def _layer_dims(dims: int, hidden: tuple[int, ...], classes: int):
    widths = (dims, *hidden, classes)
    return tuple(zip(widths[:-1], widths[1:]))


def build_world(cfg: ExperimentConfig) -> World:
    """Assemble disjoint test/public/private pools and the client fleet."""
    d = cfg.data
    base = _base_dataset(cfg)
    needs_public = cfg.flags.hfl or cfg.strategy == "hetero_distill"
    if needs_public and d.n_public < 1:
        raise ConfigError(
            f"strategy {cfg.strategy!r} distills over a public dataset; set data.n_public >= 1"
        )
    n_public = d.n_public if needs_public else 0
    needed = d.test_size + n_public + d.clients * d.shard_size
    if needed > base.size:
        raise ConfigError(
            f"dataset has {base.size} samples but the split needs {needed} "
            f"(test {d.test_size} + public {n_public} + shards {d.clients}x{d.shard_size})"
        )
    test, rest = datahub.random_split(base, d.test_size, (cfg.seed, _S_TEST))
    if needs_public:
        public, rest = datahub.random_split(rest, n_public, (cfg.seed, _S_PUBLIC))
    else:
        public = None
    plan = datahub.PartitionPlan(
        scheme=d.scheme,
        client_count=d.clients,
        seed=(cfg.seed, _S_PARTITION),
        sizes=(d.shard_size,) * d.clients,
        concentration=d.concentration,
    )
    shards = datahub.partition(rest, plan)

    noise = d.noise
    if noise.random_range is not None:
        lo, hi = noise.random_range
        rates = random_noise_assignment(d.clients, lo, hi, (cfg.seed, _S_RATES)).tolist()
        kind = noise.kind if noise.kind != "none" else "symmetric"
    else:
        rates = [noise.rate] * d.clients
        kind = noise.kind

    if cfg.strategy == "fedavg":
        if len(set(cfg.hidden_layers)) > 1:
            raise ConfigError("fedavg requires a homogeneous architecture")
        # One global init: every client starts from the same parameters.
        shared_hidden = cfg.hidden_layers[0]
        dims0 = _layer_dims(base.features.shape[1], shared_hidden, base.class_count)
        global_params = nn.init_params(dims0, (cfg.seed, _S_INIT))
        archs = [dims0] * d.clients
        params_list = [global_params] * d.clients
    else:
        archs = [
            _layer_dims(
                base.features.shape[1],
                cfg.hidden_layers[k % len(cfg.hidden_layers)],
                base.class_count,
            )
            for k in range(d.clients)
        ]
        params_list = [
            nn.init_params(arch, (cfg.seed, _S_INIT, k)) for k, arch in enumerate(archs)
        ]

    clients = []
    for k in range(d.clients):
        noisy = datahub.apply_noise(
            shards[k], datahub.NoiseSpec(kind, rates[k], (cfg.seed, _S_NOISE, k))
        )
        clients.append(
            protocol.ClientState(
                client_id=k,
                params=params_list[k],
                shard=noisy,
                rng=np.random.default_rng((cfg.seed, _S_TRAIN, k)),
            )
        )
    return World(clients, public, test, [float(r) for r in rates], archs)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1):
    """Build the world and execute the configured federation run."""
    world = build_world(cfg)
    result = protocol.run_federation(
        world.clients,
        cfg.strategy_config(),
        world.test,
        world.public,
        jobs=jobs,
        sampler_seed=(cfg.seed, _S_SAMPLER),
    )
    return result, world


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def run_dir_name(resolved: dict) -> str:
    noise = resolved["data"]["noise"]
    rate = noise["rate"] if noise["random_range"] is None else "rand"
    return (
        f"{resolved['strategy']}_{noise['kind']}{rate}_s{resolved['seed']}"
        f"_{config_hash(resolved)}"
    )


def _round_lines(result: protocol.RunResult):
    for record in result.records:
        for stats in record.clients:
            yield {
                "round": record.round_idx,
                "client": stats.client_id,
                "accuracy": stats.accuracy,
                "roc_auc": stats.roc_auc,
                "pr_auc": stats.pr_auc,
                "mean_sl_loss": stats.mean_sl_loss,
                "q": stats.q,
                "p": stats.p,
                "f": stats.f,
                "weight": stats.weight,
                "clamp_events": record.clamp_events,
            }


def execute_run(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> Path:
    """Run one cell into its content-addressed directory; skip if finished."""
    resolved = echo_config(cfg)
    run_dir = Path(out_dir) / run_dir_name(resolved)
    digest = config_hash(resolved)
    done = run_dir / DONE_FILE
    if done.exists() and done.read_text().strip() == digest:
        return run_dir
    started = time.perf_counter()
    result, world = run_experiment(cfg, jobs=jobs)
    total = time.perf_counter() - started
    run_dir.mkdir(parents=True, exist_ok=True)

    with open(run_dir / ROUNDS_FILE, "w") as fh:
        for line in _round_lines(result):
            fh.write(json.dumps(line) + "\n")
    with open(run_dir / CONFIG_FILE, "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    meta = {
        "config_hash": digest,
        "clients": len(world.clients),
        "rounds": cfg.rounds,
        "strategy": cfg.strategy,
        "flags": resolved["flags"],
        "noise_kind": resolved["data"]["noise"]["kind"],
        "noise_rates": world.noise_rates,
        "flip_fractions": [c.shard.flip_fraction for c in world.clients],
        "hidden_layers": [list(map(list, a)) for a in world.archs],
        "messages": len(result.messages.entries),
    }
    with open(run_dir / META_FILE, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    # Timings are the one deliberately non-deterministic artifact.
    with open(run_dir / TIMING_FILE, "w") as fh:
        json.dump(
            {"total_seconds": total, "round_seconds": result.round_seconds}, fh, indent=2
        )
        fh.write("\n")
    done.write_text(digest + "\n")
    return run_dir


def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of grid axes -> list of {dotted_key: value} cells."""
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("grid must be a non-empty object of axes")
    axes = []
    for key in sorted(grid):
        values = grid[key]
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid axis {key!r} must be a non-empty list")
        axes.append((GRID_ALIASES.get(key, key), values))
    cells = [{}]
    for key, values in axes:
        cells = [{**cell, key: value} for cell in cells for value in values]
    return cells


@dataclass
class SweepOutcome:
    run_dirs: list[Path]
    failures: dict[str, str]


def run_sweep(base_resolved: dict, grid: dict, out_dir, jobs: int = 1) -> SweepOutcome:
    """Execute every grid cell; failures are recorded, not fatal."""
    cells = expand_grid(grid)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def build_cfg(cell: dict) -> ExperimentConfig:
        doc = json.loads(json.dumps(base_resolved))
        for key, value in cell.items():
            patch = _nest(key, value)
            _walk_keys(patch, SCHEMA, "<grid>")
            doc = _deep_merge(doc, patch)
        return ExperimentConfig.from_dict(doc)

    def one(cell: dict):
        label = json.dumps(cell, sort_keys=True)
        try:
            return label, execute_run(build_cfg(cell), out_dir, jobs=1), None
        except Exception as exc:  # cell failures must not kill the sweep
            return label, None, f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, cells))
    else:
        results = [one(cell) for cell in cells]

    outcome = SweepOutcome([], {})
    for label, run_dir, error in results:
        if error is None:
            outcome.run_dirs.append(run_dir)
        else:
            outcome.failures[label] = error
    report = {
        "cells": len(cells),
        "failed": sorted(outcome.failures),
        "errors": outcome.failures,
    }
    with open(out_dir / "sweep_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return outcome


def _load_run(run_dir: Path):
    rounds_path = run_dir / ROUNDS_FILE
    config_path = run_dir / CONFIG_FILE
    if not rounds_path.exists() or not config_path.exists():
        return None
    with open(config_path) as fh:
        resolved = json.load(fh)
    per_round: dict[int, dict[int, dict]] = {}
    with open(rounds_path) as fh:
        for line in fh:
            rec = json.loads(line)
            per_round.setdefault(rec["round"], {})[rec["client"]] = rec
    return resolved, per_round


def discover_runs(roots) -> list[Path]:
    found = []
    for root in roots:
        root = Path(root)
        if (root / ROUNDS_FILE).exists():
            found.append(root)
            continue
        if root.is_dir():
            found.extend(sorted(p.parent for p in root.glob(f"*/{ROUNDS_FILE}")))
    return found


def summarize(run_dirs, out_path, which: str = "final") -> list[dict]:
    """Final (or best) per-client accuracy table across runs, as CSV.

    One row per run and metric variant; the ``avg`` column is the
    unweighted client mean.
    """
    if which not in ("final", "best", "both"):
        raise ConfigError("which must be final, best, or both")
    run_dirs = [Path(p) for p in run_dirs]
    if not run_dirs:
        raise ConfigError("no run directories given")
    missing = [str(p) for p in run_dirs if _load_run(p) is None]
    if missing:
        raise ConfigError(f"missing logs for cells: {missing}")

    variants = ("final", "best") if which == "both" else (which,)
    rows = []
    max_clients = 0
    for run_dir in run_dirs:
        resolved, per_round = _load_run(run_dir)
        client_ids = sorted({c for recs in per_round.values() for c in recs})
        max_clients = max(max_clients, len(client_ids))

        def row_for(round_idx: int, variant: str):
            recs = per_round[round_idx]
            accs = {c: recs[c]["accuracy"] for c in client_ids}
            per_client = {c: (accs[c], None, None, 0.0) for c in client_ids}
            avg = metrics.EvalResult.from_per_client(per_client).accuracy
            noise = resolved["data"]["noise"]
            row = {
                "run": run_dir.name,
                "strategy": resolved["strategy"],
                "hfl": resolved["flags"]["hfl"],
                "sl": resolved["flags"]["sl"],
                "dlr": resolved["flags"]["dlr"],
                "reweight": resolved["flags"]["reweight"],
                "noise_kind": noise["kind"],
                "noise_rate": noise["rate"],
                "seed": resolved["seed"],
                "metric": f"{variant}_round_accuracy",
                "round": round_idx,
                "avg": avg,
            }
            for pos, c in enumerate(client_ids, start=1):
                row[f"theta_{pos}"] = accs[c]
            return row

        final_round = max(per_round)
        for variant in variants:
            if variant == "final":
                rows.append(row_for(final_round, "final"))
            else:
                best_round = max(
                    sorted(per_round),
                    key=lambda r: (np.mean([per_round[r][c]["accuracy"] for c in client_ids]), -r),
                )
                rows.append(row_for(best_round, "best"))

    fields = [
        "run", "strategy", "hfl", "sl", "dlr", "reweight", "noise_kind",
        "noise_rate", "seed", "metric", "round",
    ] + [f"theta_{i}" for i in range(1, max_clients + 1)] + ["avg"]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return rows


def ablation_rows() -> list[dict]:
    """The six component rows of the ablation grid, as flag documents."""
    return [
        {"hfl": False, "sl": False, "dlr": False, "reweight": "none"},
        {"hfl": True, "sl": False, "dlr": False, "reweight": "none"},
        {"hfl": False, "sl": True, "dlr": False, "reweight": "none"},
        {"hfl": True, "sl": True, "dlr": False, "reweight": "none"},
        {"hfl": True, "sl": True, "dlr": True, "reweight": "none"},
        {"hfl": True, "sl": True, "dlr": True, "reweight": "eccr"},
    ]
