"""Deterministic result files: rounds table, local (pre-aggregation) table, summary, config echo.

Nothing time-dependent is written, so the same config reproduces every file
byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedlora.adapters import save_adapter

ROUNDS_HEADER = "round,client,split,loss,accuracy,precision,recall,f1,uplink_bytes,downlink_bytes"
METRIC_COLUMNS = ("loss", "accuracy", "precision", "recall", "f1")


class OutputError(OSError):
    pass


@dataclass(frozen=True)
class OutputBundle:
    rounds: Path
    local_rounds: Path
    summary: Path
    config: Path
    adapters: tuple = ()


def fmt(x):
    """Six significant digits, the one float format used in every output file."""
    return f"{float(x):.6g}"


def _round6(x):
    return float(fmt(x))


def _metric_cells(m):
    return [fmt(m.mean_loss), fmt(m.accuracy), fmt(m.macro_precision), fmt(m.macro_recall), fmt(m.macro_f1)]


def rounds_table(reports):
    """Rows ordered by round, then client id, then split (train before eval)."""
    lines = [ROUNDS_HEADER]
    for rep in reports:
        for row in sorted(rep.clients, key=lambda r: r.client):
            for split, m in (("train", row.train), ("eval", row.eval)):
                cells = [str(rep.round), str(row.client), split, *_metric_cells(m), str(row.uplink_bytes), str(row.downlink_bytes)]
                lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def local_table(reports):
    """Eval-split metrics measured after local training but before aggregation."""
    lines = [ROUNDS_HEADER]
    for rep in reports:
        for row in sorted(rep.clients, key=lambda r: r.client):
            if row.local is None:
                continue
            cells = [str(rep.round), str(row.client), "local", *_metric_cells(row.local), str(row.uplink_bytes), str(row.downlink_bytes)]
            lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _metrics_dict(m):
    return {
        "loss": _round6(m.mean_loss),
        "accuracy": _round6(m.accuracy),
        "precision": _round6(m.macro_precision),
        "recall": _round6(m.macro_recall),
        "f1": _round6(m.macro_f1),
        "micro_f1": _round6(m.micro_f1),
        "n": int(m.n),
    }


def build_summary(result):
    cfg = result.config
    reports = result.reports
    final = reports[-1]
    per_client = [dict(client=r.client, **_metrics_dict(r.eval)) for r in sorted(final.clients, key=lambda r: r.client)]
    mean = {
        k: _round6(np.mean([getattr(r.eval, attr) for r in final.clients]))
        for k, attr in (("loss", "mean_loss"), ("accuracy", "accuracy"), ("precision", "macro_precision"),
                        ("recall", "macro_recall"), ("f1", "macro_f1"), ("micro_f1", "micro_f1"))
    }
    return {
        "mode": cfg.mode,
        "strategy": cfg.adapter.strategy,
        "aggregator": cfg.federation.aggregator,
        "prox_mu": cfg.prox_mu,
        "lr": cfg.federation.lr,
        "rank": cfg.adapter.rank,
        "alpha": cfg.adapter.alpha,
        "adapter_scale": _round6(cfg.effective_alpha / cfg.adapter.rank),
        "seed": cfg.seed,
        "rounds": len(reports) - 1,
        "final_round": final.round,
        "averaging": "macro over classes present in the eval split; 0/0 precision or recall counts as 0",
        "evaluation": "post-downlink, each client's local eval split",
        "final_clients": per_client,
        "final_mean": mean,
        "final_pooled_eval": _metrics_dict(final.pooled_eval),
        "round0_mean": _metrics_dict(reports[0].mean_eval),
        "round0_pooled_eval": _metrics_dict(reports[0].pooled_eval),
        "total_uplink_bytes": int(sum(r.uplink_bytes for r in reports)),
        "total_downlink_bytes": int(sum(r.downlink_bytes for r in reports)),
        "base_checksum": result.base_checksum_before,
        "pretrain": {k: (_round6(v) if isinstance(v, float) else v) for k, v in sorted(result.base.pretrain_meta.items())},
    }


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path, text):
    try:
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc


def emit_outputs(result, out_dir=None):
    if not result.reports:
        raise ValueError("no round reports to write")
    out = Path(out_dir if out_dir is not None else result.config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    bundle = OutputBundle(out / "rounds.csv", out / "local_rounds.csv", out / "summary.json", out / "config.json")
    _write(bundle.rounds, rounds_table(result.reports))
    _write(bundle.local_rounds, local_table(result.reports))
    _write(bundle.summary, dump_json(build_summary(result)))
    _write(bundle.config, result.config.to_json())
    if result.config.federation.save_adapters:
        adir = out / "adapters"
        adir.mkdir(exist_ok=True)
        paths = tuple(save_adapter(c.adapter, adir / f"client-{c.id:03d}.fvlm") for c in result.clients)
        bundle = OutputBundle(bundle.rounds, bundle.local_rounds, bundle.summary, bundle.config, paths)
    return bundle


def read_rounds(path):
    text = Path(path).read_text()
    if text.splitlines()[0] != ROUNDS_HEADER:
        raise ValueError(f"{path}: unexpected header, expected {ROUNDS_HEADER!r}")
    return list(csv.DictReader(io.StringIO(text)))


def summary_from_rounds(path):
    """Recompute the headline numbers from a rounds table alone."""
    rows = read_rounds(path)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    final_round = max(int(r["round"]) for r in rows)
    final = sorted((r for r in rows if int(r["round"]) == final_round and r["split"] == "eval"), key=lambda r: int(r["client"]))
    clients = [{"client": int(r["client"]), **{c: float(r[c]) for c in METRIC_COLUMNS}} for r in final]
    eval_rows = [r for r in rows if r["split"] == "eval"]
    return {
        "final_round": final_round,
        "final_clients": clients,
        "final_mean": {c: _round6(np.mean([cl[c] for cl in clients])) for c in METRIC_COLUMNS},
        "total_uplink_bytes": sum(int(r["uplink_bytes"]) for r in eval_rows),
        "total_downlink_bytes": sum(int(r["downlink_bytes"]) for r in eval_rows),
    }
