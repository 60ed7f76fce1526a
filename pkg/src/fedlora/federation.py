"""Round engine: local training, uplink, server aggregation, downlink, evaluation.

Every random draw a client makes is addressed by ``(seed, purpose, client,
round, ...)``, and the server waits for all participants before aggregating,
so running clients on a thread pool gives the same bits as running them in
order.
"""

from __future__ import annotations

import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from fedlora import streams
from fedlora.adapters import (
    StrategyKind,
    UplinkPayload,
    client_adapter_rng,
    extract_uplink,
    init_adapter,
    install_downlink,
)
from fedlora.config import validate
from fedlora.data import carve_pretrain_pool, gen_mixture, partition_domains, partition_iid, partition_shards
from fedlora.layers import lora_backward, lora_forward, make_dropout_mask, softmax_cross_entropy_rows
from fedlora.linalg import RngStream, ShapeError
from fedlora.metrics import confusion_from_predictions, macro_metrics, mean_report, predict
from fedlora.model import ModelConfig, build_base, extract_features, pretrain_base

logger = logging.getLogger(__name__)


class AggregatorKind(enum.Enum):
    MEAN = "mean"
    WEIGHTED = "weighted"


class RoundFailed(RuntimeError):
    """A client failed during a round; every client keeps its pre-round state."""


@dataclass(frozen=True)
class LocalHyper:
    lr: float = 1e-3
    batch_size: int = 16
    local_epochs: int = 3
    prox_mu: float = 0.0


@dataclass(frozen=True)
class ClientState:
    id: int
    train_x: np.ndarray  # cached frozen-extractor features, (n_train, H)
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    adapter: object  # LoraAdapter
    hyper: LocalHyper
    rng: RngStream  # experiment root; paths are derived per purpose
    reference: dict | None = None  # matrices as of the last downlink
    eval_index: np.ndarray | None = None  # dataset indices of eval rows

    @property
    def num_train(self):
        return int(self.train_y.shape[0])


@dataclass
class ServerState:
    round: int = 0
    global_mats: dict | None = None
    aggregator: AggregatorKind = AggregatorKind.MEAN
    base_checksum: str = ""


@dataclass(frozen=True)
class ClientRound:
    client: int
    train: object  # MetricsReport, post-downlink, train split
    eval: object  # MetricsReport, post-downlink, eval split
    local: object | None  # MetricsReport, eval split before aggregation
    train_loss: float
    uplink_bytes: int
    downlink_bytes: int


@dataclass
class RoundReport:
    round: int
    clients: list
    mean_eval: object
    pooled_eval: object
    uplink_bytes: int
    downlink_bytes: int
    wall_time: float = field(default=0.0, compare=False)


# --- local objective ------------------------------------------------------------


def batch_loss_and_grads(head, adapter, x, y, mask):
    """Mean cross entropy over a batch and its gradients w.r.t. A and B."""
    logits = lora_forward(head, adapter, x, mask)
    losses, dlogits = softmax_cross_entropy_rows(logits, y)
    g = lora_backward(head, adapter, x, mask, dlogits / y.shape[0])
    return float(losses.mean()), g.dA, g.dB


def prox_grads(adapter, dA, dB, mu, reference):
    """Add the gradient of ``(mu/2) ||M - M_ref||^2`` for each trainable matrix."""
    if mu == 0.0:
        return dA, dB
    if reference is None:
        raise ValueError("FedProx with mu > 0 needs the downlinked reference matrices")
    dB = dB + mu * (adapter.B - reference["B"])
    if adapter.strategy.trains_a:
        dA = dA + mu * (adapter.A - reference["A"])
    return dA, dB


def local_train(client, base, round_idx):
    """Mini-batch SGD on the client's train split; returns ``(new_state, mean_loss)``."""
    h = client.hyper
    if h.prox_mu > 0.0 and client.reference is None:
        raise ValueError(f"client {client.id}: FedProx needs a downlink reference")
    adapter = client.adapter
    head = base.head
    n = client.num_train
    losses = []
    for epoch in range(h.local_epochs):
        order = client.rng.child(streams.LOCAL_SHUFFLE, client.id, round_idx, epoch).generator().permutation(n)
        for step, start in enumerate(range(0, n, h.batch_size)):
            idx = order[start : start + h.batch_size]
            x, y = client.train_x[idx], client.train_y[idx]
            mask = None
            if adapter.dropout > 0.0:
                path = client.rng.child(streams.DROPOUT, client.id, round_idx, epoch, step)
                mask = make_dropout_mask(x.shape[1], adapter.dropout, path, batch=x.shape[0])
            loss, dA, dB = batch_loss_and_grads(head, adapter, x, y, mask)
            if not np.isfinite(loss):
                raise FloatingPointError(f"client {client.id}: loss diverged in round {round_idx}, epoch {epoch}, step {step}")
            dA, dB = prox_grads(adapter, dA, dB, h.prox_mu, client.reference)
            newB = adapter.B - h.lr * dB
            newA = adapter.A - h.lr * dA if adapter.strategy.trains_a else None
            adapter = adapter.with_matrices(A=newA, B=newB)
            losses.append(loss)
    return replace(client, adapter=adapter), float(np.mean(losses)) if losses else 0.0


# --- aggregation ----------------------------------------------------------------


def _shared_keys(payloads):
    if not payloads:
        raise ValueError("need at least one payload to aggregate")
    keys = sorted(payloads[0].matrices)
    for p in payloads:
        if sorted(p.matrices) != keys:
            raise ShapeError("payloads carry different matrix sets")
        for k in keys:
            if p.matrices[k].shape != payloads[0].matrices[k].shape:
                raise ShapeError(
                    f"payload shape mismatch for {k}: {p.matrices[k].shape} vs {payloads[0].matrices[k].shape}"
                )
    return keys


def _rounded_mean(mats, weights):
    """Correctly rounded ``sum(w_k M_k) / sum(w_k)`` per element.

    Summing as exact rationals makes the result independent of payload order
    and makes k identical payloads a fixed point, which a running float sum
    does not guarantee (e.g. ``(x + x + x) / 3 != x`` for some x).
    """
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in mats]).reshape(len(mats), -1)
    total = sum(weights)
    out = np.empty(stack.shape[1])
    for j, column in enumerate(stack.T.tolist()):
        acc = Fraction(0)
        for v, w in zip(column, weights):
            acc += w * Fraction(v)
        out[j] = float(acc / total)
    return out.reshape(np.shape(mats[0]))


def aggregate_mean(payloads):
    """Elementwise arithmetic mean per shared matrix."""
    payloads = list(payloads)
    keys = _shared_keys(payloads)
    ones = [1] * len(payloads)
    return {k: _rounded_mean([p.matrices[k] for p in payloads], ones) for k in keys}


def aggregate_weighted(payloads):
    """Sample-count weighted mean ``sum(n_k B_k) / sum(n_k)``; equal counts give the plain mean."""
    payloads = list(payloads)
    counts = [p.sample_count for p in payloads]
    if not payloads or any(c <= 0 for c in counts):
        raise ValueError(f"weighted aggregation needs positive sample counts, got {counts}")
    keys = _shared_keys(payloads)
    return {k: _rounded_mean([p.matrices[k] for p in payloads], counts) for k in keys}


def aggregate(payloads, kind):
    kind = AggregatorKind(kind) if not isinstance(kind, AggregatorKind) else kind
    return aggregate_mean(payloads) if kind is AggregatorKind.MEAN else aggregate_weighted(payloads)


# --- evaluation -----------------------------------------------------------------


def evaluate(head, adapter, x, y, num_classes):
    logits = lora_forward(head, adapter, x)
    losses, _ = softmax_cross_entropy_rows(logits, y)
    cm = confusion_from_predictions(y, predict(logits), num_classes)
    return macro_metrics(cm, losses)


def _pooled_eval(base, clients, num_classes):
    """All eval examples together, each scored by its own client's model, in index order."""
    logits, ys, order = [], [], []
    for c in clients:
        logits.append(lora_forward(base.head, c.adapter, c.eval_x))
        ys.append(c.eval_y)
        order.append(c.eval_index)
    logits = np.concatenate(logits)
    ys = np.concatenate(ys)
    perm = np.argsort(np.concatenate(order), kind="stable")
    logits, ys = logits[perm], ys[perm]
    losses, _ = softmax_cross_entropy_rows(logits, ys)
    return macro_metrics(confusion_from_predictions(ys, predict(logits), num_classes), losses)


# --- rounds -----------------------------------------------------------------------


def _map(fn, items, workers):
    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def select_participants(num_clients, fraction, rng, round_idx):
    if fraction >= 1.0:
        return list(range(num_clients))
    k = max(1, int(round(fraction * num_clients)))
    chosen = rng.child(streams.PARTICIPATION, round_idx).generator().choice(num_clients, size=k, replace=False)
    return sorted(int(c) for c in chosen)


def run_round(server, clients, base, participation=1.0, workers=1, communicate=True, uplink_sink=None):
    """One full round. Returns ``(server, clients, report)``; inputs are not modified.

    ``communicate=False`` is centralized training: no payloads, no aggregation.
    ``uplink_sink``, if given, is called with each serialized uplink payload.
    """
    t0 = time.perf_counter()
    round_idx = server.round + 1
    strategy = clients[0].adapter.strategy
    num_classes = base.head.out_dim
    chosen = select_participants(len(clients), participation, clients[0].rng, round_idx)

    def work(cid):
        return local_train(clients[cid], base, round_idx)

    try:
        trained = _map(work, chosen, workers)
    except Exception as exc:  # noqa: BLE001 - any client failure aborts the round
        raise RoundFailed(f"round {round_idx} aborted: {exc}") from exc

    updated = list(clients)
    train_loss = {}
    for cid, (state, loss) in zip(chosen, trained):
        updated[cid] = state
        train_loss[cid] = loss

    local = {cid: evaluate(base.head, updated[cid].adapter, updated[cid].eval_x, updated[cid].eval_y, num_classes) for cid in chosen}

    up_bytes = {cid: 0 for cid in range(len(clients))}
    down_bytes = {cid: 0 for cid in range(len(clients))}
    if communicate:
        payloads = []
        for cid in chosen:
            p = extract_uplink(updated[cid].adapter, strategy, updated[cid].num_train, cid, round_idx)
            payloads.append(p)
            up_bytes[cid] = p.byte_size
            if uplink_sink is not None:
                uplink_sink(p.to_bytes())
        global_mats = aggregate(payloads, server.aggregator)
        total = sum(p.sample_count for p in payloads)
        m, n, r = payloads[0].shape
        for cid, c in enumerate(updated):
            down = UplinkPayload(cid, round_idx, strategy, {k: global_mats[k] for k in sorted(global_mats)}, total, (m, n, r))
            down_bytes[cid] = down.byte_size
            adapter = install_downlink(c.adapter, global_mats, strategy)
            updated[cid] = replace(c, adapter=adapter, reference={"A": adapter.A, "B": adapter.B})
        server = replace(server, round=round_idx, global_mats=global_mats)
    else:
        updated = [replace(c, reference={"A": c.adapter.A, "B": c.adapter.B}) for c in updated]
        server = replace(server, round=round_idx)

    rows = []
    for cid, c in enumerate(updated):
        rows.append(
            ClientRound(
                client=cid,
                train=evaluate(base.head, c.adapter, c.train_x, c.train_y, num_classes),
                eval=evaluate(base.head, c.adapter, c.eval_x, c.eval_y, num_classes),
                local=local.get(cid),
                train_loss=train_loss.get(cid, 0.0),
                uplink_bytes=up_bytes[cid],
                downlink_bytes=down_bytes[cid],
            )
        )
    report = RoundReport(
        round=round_idx,
        clients=rows,
        mean_eval=mean_report(r.eval for r in rows),
        pooled_eval=_pooled_eval(base, updated, num_classes),
        uplink_bytes=sum(up_bytes.values()),
        downlink_bytes=sum(down_bytes.values()),
        wall_time=time.perf_counter() - t0,
    )
    return server, updated, report


def initial_report(base, clients):
    """Round 0: every client evaluated with its fresh (B = 0) adapter."""
    num_classes = base.head.out_dim
    rows = [
        ClientRound(
            client=c.id,
            train=evaluate(base.head, c.adapter, c.train_x, c.train_y, num_classes),
            eval=evaluate(base.head, c.adapter, c.eval_x, c.eval_y, num_classes),
            local=None,
            train_loss=0.0,
            uplink_bytes=0,
            downlink_bytes=0,
        )
        for c in clients
    ]
    return RoundReport(0, rows, mean_report(r.eval for r in rows), _pooled_eval(base, clients, num_classes), 0, 0)


# --- experiment -------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: object
    reports: list
    base: object
    clients: list
    server: ServerState
    dataset: object
    partition: object
    base_checksum_before: str = ""
    base_checksum_after: str = ""


def build_dataset(cfg, root):
    d, m = cfg.data, cfg.model
    return gen_mixture(
        num_classes=m.num_classes,
        visual_shape=(m.visual_tokens, m.visual_dim),
        text_shape=(m.text_tokens, m.text_dim),
        per_class=d.per_class,
        separation=d.separation,
        rng=root.child(streams.DATA_GEN),
        noise_std=d.noise_std,
        num_domains=d.num_domains,
        domain_shift=d.domain_shift,
        label_skew=d.label_skew,
    )


def build_partition(cfg, dataset, indices, root):
    d, k = cfg.data, cfg.federation.clients
    rng = root.child(streams.PARTITION, 1)
    if d.partition == "domain":
        return partition_domains(dataset, k, d.eval_fraction, rng, indices)
    if d.partition == "iid":
        return partition_iid(dataset, k, d.eval_fraction, rng, indices)
    return partition_shards(dataset, d.num_shards, d.shards_per_client, k, d.eval_fraction, rng, indices)


def model_config(cfg):
    m = cfg.model
    return ModelConfig(m.visual_dim, m.text_dim, m.visual_tokens, m.text_tokens, m.hidden_dim, m.num_classes, cfg.seed)


def prepare_base(cfg, dataset, pool, root):
    base = build_base(model_config(cfg), root.child(streams.MODEL_INIT))
    return pretrain_base(
        base, dataset, pool, cfg.model.pretrain_epochs, cfg.model.pretrain_lr,
        root.child(streams.PRETRAIN), batch_size=cfg.model.pretrain_batch_size,
    )


def make_clients(cfg, base, dataset, partition, root):
    strategy = StrategyKind.parse(cfg.adapter.strategy)
    hyper = LocalHyper(cfg.federation.lr, cfg.federation.batch_size, cfg.federation.local_epochs, cfg.prox_mu)
    m, n = base.head.weight.shape
    clients = []
    for cid, split in enumerate(partition.clients):
        adapter = init_adapter(
            m, n, cfg.adapter.rank, cfg.effective_alpha, cfg.adapter.dropout, strategy,
            client_adapter_rng(root, strategy, cid, cfg.adapter.shared_frozen_a),
        )
        state = ClientState(
            id=cid,
            train_x=extract_features(base, dataset.visual[split.train], dataset.text[split.train]),
            train_y=dataset.labels[split.train],
            eval_x=extract_features(base, dataset.visual[split.eval], dataset.text[split.eval]),
            eval_y=dataset.labels[split.eval],
            adapter=adapter,
            hyper=hyper,
            rng=root,
            reference={"A": adapter.A, "B": adapter.B},
            eval_index=split.eval,
        )
        clients.append(state)
    return clients


def run_experiment(cfg, workers=1, base=None, uplink_sink=None):
    """Build data, base and clients from ``cfg.seed``, then run ``cfg.federation.rounds`` rounds.

    ``base`` may be a pretrained base to reuse; it must match what
    the config would have produced for results to be reproducible from the
    config alone.
    """
    validate(cfg)
    root = RngStream(cfg.seed)
    dataset = build_dataset(cfg, root)
    pool, rest = carve_pretrain_pool(dataset, cfg.data.pretrain_fraction, root.child(streams.PARTITION, 0))
    if base is None:
        base = prepare_base(cfg, dataset, pool, root)
    before = base.checksum()
    base.lock()
    partition = build_partition(cfg, dataset, rest, root)
    centralized = cfg.mode == "centralized"
    if centralized:
        partition = partition.pooled()
    clients = make_clients(cfg, base, dataset, partition, root)
    server = ServerState(aggregator=AggregatorKind(cfg.federation.aggregator), base_checksum=before)
    reports = [initial_report(base, clients)]
    participation = 1.0 if centralized else cfg.federation.participation
    for _ in range(cfg.federation.rounds):
        server, clients, report = run_round(
            server, clients, base, participation=participation, workers=workers,
            communicate=not centralized, uplink_sink=uplink_sink,
        )
        logger.info(
            "round %d: mean eval acc %.4f, uplink %d B (%.2fs)",
            report.round, report.mean_eval.accuracy, report.uplink_bytes, report.wall_time,
        )
        reports.append(report)
    after = base.checksum()
    if after != before:
        raise AssertionError("frozen base changed during federation")
    return ExperimentResult(cfg, reports, base, clients, server, dataset, partition, before, after)
