"""Named experiment presets.

A preset is a JSON file shipped in ``fedlora/presets``: a partial config tree,
an optional one-key sweep and a list of seeds. Expanding it yields one
``ExperimentConfig`` per (sweep value, seed); nothing else is hard-coded here.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, replace
from importlib import resources
from pathlib import Path

import numpy as np

from fedlora.config import ConfigError, ExperimentConfig, parse_override, set_path, validate
from fedlora.federation import run_experiment
from fedlora.output import dump_json, emit_outputs, fmt

logger = logging.getLogger(__name__)

PRESET_SUMMARY_HEADER = "variant,seed,final_accuracy,final_precision,final_recall,final_f1,final_loss,round0_accuracy,uplink_bytes,downlink_bytes"


class UnknownPreset(KeyError):
    pass


def preset_names():
    files = resources.files("fedlora").joinpath("presets").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".json"))


def load_preset(name):
    if name not in preset_names():
        raise UnknownPreset(name)
    text = resources.files("fedlora").joinpath("presets", f"{name}.json").read_text()
    preset = json.loads(text)
    unknown = set(preset) - {"description", "config", "sweep", "seeds"}
    if unknown:
        raise ConfigError([f"preset {name}: unknown key {k}" for k in sorted(unknown)])
    return preset


def _variant_label(key, value):
    if not key:
        return "base"
    shown = value if isinstance(value, str) else json.dumps(value)
    return f"{key.split('.')[-1]}={shown}"


def expand_preset(name, overrides=(), seeds=None):
    """Return ``[(variant_label, seed, config), ...]`` in run order."""
    preset = load_preset(name)
    base = ExperimentConfig.from_dict(preset.get("config", {}))
    sweep = preset.get("sweep") or {}
    key = sweep.get("key")
    values = sweep.get("values", [None])
    seeds = list(preset.get("seeds", [0]) if seeds is None else seeds)
    parsed = [parse_override(o) if isinstance(o, str) else o for o in overrides]
    runs = []
    for value in values:
        label = _variant_label(key, value)
        for seed in seeds:
            cfg = replace(base, seed=int(seed))
            if key:
                cfg = set_path(cfg, key, value)
            for k, v in parsed:
                cfg = set_path(cfg, k, v)
            runs.append((label, int(seed), validate(cfg)))
    return runs


def run_preset(name, out_dir, overrides=(), seeds=None, workers=1):
    """Run every variant and seed, write each run's files and a preset summary.

    Returns ``{variant: [ExperimentResult, ...]}``.
    """
    runs = expand_preset(name, overrides, seeds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    bases = {}
    rows = [PRESET_SUMMARY_HEADER]
    for label, seed, cfg in runs:
        run_dir = out / label / f"seed-{seed}"
        cfg = replace(cfg, output_dir=str(run_dir))
        logger.info("preset %s: %s seed %d", name, label, seed)
        # the pretrained base depends only on seed, data and model settings
        key = json.dumps([cfg.seed, asdict(cfg.data), asdict(cfg.model)], sort_keys=True)
        result = run_experiment(cfg, workers=workers, base=bases.get(key))
        bases[key] = result.base
        emit_outputs(result, run_dir)
        results.setdefault(label, []).append(result)
        rows.append(_summary_row(label, str(seed), [result]))
    for label, group in results.items():
        rows.append(_summary_row(label, "mean", group))
    (out / "preset_summary.csv").write_text("\n".join(rows) + "\n")
    (out / "preset.json").write_text(
        dump_json({"preset": name, "overrides": [list(parse_override(o)) if isinstance(o, str) else list(o) for o in overrides],
                   "runs": [[label, seed] for label, seed, _ in runs]})
    )
    return results


def final_mean(result, attr="accuracy"):
    return float(np.mean([getattr(r.eval, attr) for r in result.reports[-1].clients]))


def _summary_row(label, seed, group):
    cols = [
        np.mean([final_mean(r, "accuracy") for r in group]),
        np.mean([final_mean(r, "macro_precision") for r in group]),
        np.mean([final_mean(r, "macro_recall") for r in group]),
        np.mean([final_mean(r, "macro_f1") for r in group]),
        np.mean([final_mean(r, "mean_loss") for r in group]),
        np.mean([r.reports[0].pooled_eval.accuracy for r in group]),
    ]
    up = np.mean([sum(rep.uplink_bytes for rep in r.reports) for r in group])
    down = np.mean([sum(rep.downlink_bytes for rep in r.reports) for r in group])
    return ",".join([label, seed, *(fmt(c) for c in cols), fmt(up), fmt(down)])
