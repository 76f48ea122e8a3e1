import json

from hetfed.config import ExperimentConfig, resolve_dict


def small_doc(**overrides) -> dict:
    """A fast desk-scale config document; overrides are deep-merged."""
    doc = {
        "seed": 0,
        "strategy": "local_only",
        "rounds": 2,
        "local_epochs": 1,
        "collab_epochs": 1,
        "batch_size": 16,
        "hyperparams": {"lr": 0.05},
        "data": {
            "classes": 3,
            "dims": 2,
            "per_class": 120,
            "spread": 0.5,
            "clients": 2,
            "shard_size": 40,
            "n_public": 20,
            "test_size": 60,
            "noise": {"kind": "pairflip", "rate": 0.2},
        },
        "archs": {"hidden_layers": [[8]]},
    }

    def merge(base, extra):
        for key, value in extra.items():
            if isinstance(value, dict) and isinstance(base.get(key), dict):
                merge(base[key], value)
            else:
                base[key] = value

    merge(doc, overrides)
    return doc


def small_cfg(**overrides) -> ExperimentConfig:
    return ExperimentConfig.from_dict(resolve_dict(small_doc(**overrides)))


def record_dicts(result):
    """Flatten RoundRecords the same way the JSONL writer does."""
    from hetfed.harness import _round_lines

    return [json.dumps(line) for line in _round_lines(result)]
