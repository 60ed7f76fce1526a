"""Synthetic two-modality classification data and client partitioners.

Each generated example carries a visual token matrix, a text token matrix, a
class label and a domain tag. Domains are label-compatible but shifted: each
applies its own fixed rotation to both modalities and over-represents a few
"home" classes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from fedlora.linalg import RngStream, matmul
from fedlora.streams import DATA_GEN, EVAL_SPLIT, PARTITION


@dataclass(frozen=True)
class Example:
    visual: np.ndarray
    text: np.ndarray
    label: int
    domain: int


@dataclass
class Dataset:
    visual: np.ndarray  # (N, N_v, D_v)
    text: np.ndarray  # (N, N_t, D_t)
    labels: np.ndarray  # (N,) int64
    domains: np.ndarray  # (N,) int64
    num_classes: int
    num_domains: int
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.labels.shape[0])

    def __getitem__(self, i):
        return Example(self.visual[i], self.text[i], int(self.labels[i]), int(self.domains[i]))

    def to_bytes(self):
        header = json.dumps(
            {
                "num_classes": self.num_classes,
                "num_domains": self.num_domains,
                "seed": self.seed,
                "meta": self.meta,
                "visual_shape": list(self.visual.shape),
                "text_shape": list(self.text.shape),
            },
            sort_keys=True,
        ).encode()
        return b"".join([
            DATA_MAGIC,
            struct.pack("<I", len(header)),
            header,
            self.labels.astype("<i8").tobytes(),
            self.domains.astype("<i8").tobytes(),
            np.ascontiguousarray(self.visual, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.text, dtype="<f8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data):
        if data[: len(DATA_MAGIC)] != DATA_MAGIC:
            raise ValueError("not an FVLM-DATA/1 file")
        off = len(DATA_MAGIC)
        (hlen,) = struct.unpack_from("<I", data, off)
        off += 4
        header = json.loads(data[off : off + hlen])
        off += hlen
        vs, ts = tuple(header["visual_shape"]), tuple(header["text_shape"])
        n = vs[0]
        need = off + 16 * n + 8 * (int(np.prod(vs)) + int(np.prod(ts)))
        if len(data) != need:
            raise ValueError(f"dataset file has {len(data)} bytes, expected {need}")
        labels = np.frombuffer(data, "<i8", n, off).astype(np.int64)
        domains = np.frombuffer(data, "<i8", n, off + 8 * n).astype(np.int64)
        off += 16 * n
        visual = np.frombuffer(data, "<f8", int(np.prod(vs)), off).reshape(vs).astype(np.float64)
        off += 8 * int(np.prod(vs))
        text = np.frombuffer(data, "<f8", int(np.prod(ts)), off).reshape(ts).astype(np.float64)
        return cls(visual, text, labels, domains, header["num_classes"], header["num_domains"], header["seed"], header["meta"])


DATA_MAGIC = b"FVLM-DATA/1\n"


def save_dataset(dataset, path):
    Path(path).write_bytes(dataset.to_bytes())


def load_dataset(path):
    return Dataset.from_bytes(Path(path).read_bytes())


def _random_rotation(dim, strength, gen):
    if strength == 0.0:
        return np.eye(dim)
    g = gen.standard_normal((dim, dim))
    skew = (g - g.T) / np.sqrt(2.0 * dim)
    return expm(strength * skew)


def _domain_counts(n, home, num_domains, home_share):
    """Split ``n`` examples of one class over domains, ``home_share`` going to ``home``."""
    counts = np.zeros(num_domains, dtype=np.int64)
    if num_domains == 1:
        counts[0] = n
        return counts
    counts[home] = int(round(home_share * n))
    rest = n - counts[home]
    others = [d for d in range(num_domains) if d != home]
    base, extra = divmod(rest, len(others))
    for j, d in enumerate(others):
        counts[d] = base + (1 if j < extra else 0)
    return counts


def gen_mixture(
    num_classes=8,
    visual_shape=(2, 8),
    text_shape=(2, 4),
    per_class=400,
    separation=10.0,
    rng=None,
    noise_std=1.0,
    num_domains=4,
    domain_shift=0.0,
    label_skew=0.0,
):
    """Class-conditional Gaussian clusters over a visual and a text modality.

    Parameters
    ----------
    per_class : int or sequence of int
        Examples per class (honored exactly).
    separation : float
        Typical distance between class means in each modality.
    domain_shift : float
        Strength of the per-domain rotation; 0 leaves domains unrotated.
    label_skew : float in [0, 1]
        0 spreads every class evenly over domains; 1 puts each class entirely
        in its home domain ``class % num_domains``.
    """
    if rng is None:
        rng = RngStream(0)
    counts = np.full(num_classes, per_class, dtype=np.int64) if np.isscalar(per_class) else np.asarray(per_class, dtype=np.int64)
    if num_classes < 2 or counts.shape != (num_classes,) or counts.min() < 1:
        raise ValueError(f"need num_classes >= 2 and >= 1 example per class, got {num_classes}, {per_class}")
    if separation <= 0 or noise_std < 0 or num_domains < 1 or not 0.0 <= label_skew <= 1.0 or domain_shift < 0:
        raise ValueError("invalid generator config: need separation > 0, noise_std >= 0, num_domains >= 1, 0 <= label_skew <= 1")
    nv, dv = visual_shape
    nt, dt = text_shape
    vis_d, txt_d = nv * dv, nt * dt

    gm = rng.child(DATA_GEN, 0).generator()
    vis_means = gm.standard_normal((num_classes, vis_d)) * separation / np.sqrt(2.0 * vis_d)
    txt_means = gm.standard_normal((num_classes, txt_d)) * separation / np.sqrt(2.0 * txt_d)
    gr = rng.child(DATA_GEN, 1).generator()
    vis_rot = [_random_rotation(vis_d, domain_shift, gr) for _ in range(num_domains)]
    txt_rot = [_random_rotation(txt_d, domain_shift, gr) for _ in range(num_domains)]

    home_share = 1.0 / num_domains + label_skew * (1.0 - 1.0 / num_domains)
    labels, domains = [], []
    for c in range(num_classes):
        dc = _domain_counts(int(counts[c]), c % num_domains, num_domains, home_share)
        labels.append(np.full(counts[c], c, dtype=np.int64))
        domains.append(np.repeat(np.arange(num_domains, dtype=np.int64), dc))
    labels = np.concatenate(labels)
    domains = np.concatenate(domains)
    order = rng.child(DATA_GEN, 2).generator().permutation(labels.shape[0])
    labels, domains = labels[order], domains[order]

    gn = rng.child(DATA_GEN, 3).generator()
    n = labels.shape[0]
    vis = vis_means[labels] + noise_std * gn.standard_normal((n, vis_d))
    txt = txt_means[labels] + noise_std * gn.standard_normal((n, txt_d))
    for d in range(num_domains):
        sel = domains == d
        vis[sel] = matmul(vis[sel], vis_rot[d].T)
        txt[sel] = matmul(txt[sel], txt_rot[d].T)

    meta = {
        "per_class": counts.tolist(),
        "separation": float(separation),
        "noise_std": float(noise_std),
        "domain_shift": float(domain_shift),
        "label_skew": float(label_skew),
        "visual_shape": [nv, dv],
        "text_shape": [nt, dt],
        "rng_path": list(rng.path),
    }
    return Dataset(
        visual=vis.reshape(n, nv, dv),
        text=txt.reshape(n, nt, dt),
        labels=labels,
        domains=domains,
        num_classes=num_classes,
        num_domains=num_domains,
        seed=rng.master_seed,
        meta=meta,
    )


# --- partitions -------------------------------------------------------------------


@dataclass(frozen=True)
class ClientSplit:
    train: np.ndarray
    eval: np.ndarray

    @property
    def all(self):
        return np.sort(np.concatenate([self.train, self.eval]))


@dataclass(frozen=True)
class Partition:
    clients: tuple  # of ClientSplit, indexed by client id
    kind: str = ""

    def __len__(self):
        return len(self.clients)

    def __getitem__(self, cid):
        return self.clients[cid]

    def validate(self, indices, disjoint_clients=True):
        """Check the partition is a disjoint exhaustive cover of ``indices``."""
        indices = np.sort(np.asarray(indices))
        seen = []
        for cid, c in enumerate(self.clients):
            if np.intersect1d(c.train, c.eval).size:
                raise AssertionError(f"client {cid}: train and eval overlap")
            seen.append(c.train)
            seen.append(c.eval)
        allidx = np.concatenate(seen) if seen else np.array([], dtype=np.int64)
        if disjoint_clients and np.unique(allidx).size != allidx.size:
            raise AssertionError("client index sets overlap")
        if not np.array_equal(np.unique(allidx), np.unique(indices)):
            raise AssertionError("partition does not cover the given indices exactly")
        return True

    def pooled(self):
        """Single-client partition holding the union of every client's data."""
        train = np.sort(np.concatenate([c.train for c in self.clients]))
        ev = np.sort(np.concatenate([c.eval for c in self.clients]))
        return Partition((ClientSplit(train, ev),), kind=f"{self.kind}+pooled")

    def pooled_eval(self):
        return np.sort(np.concatenate([c.eval for c in self.clients]))


def split_train_eval(indices, eval_fraction, rng):
    """Shuffle ``indices`` and cut off ``round(eval_fraction * n)`` of them (at least one each side)."""
    idx = np.asarray(indices, dtype=np.int64)
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    if idx.size < 2:
        raise ValueError(f"need at least 2 indices to split, got {idx.size}")
    n_eval = min(max(int(round(eval_fraction * idx.size)), 1), idx.size - 1)
    perm = rng.generator().permutation(idx.size)
    ev = np.sort(idx[perm[:n_eval]])
    tr = np.sort(idx[perm[n_eval:]])
    return tr, ev


def _resolve(dataset, indices):
    if indices is None:
        return np.arange(len(dataset), dtype=np.int64)
    return np.sort(np.asarray(indices, dtype=np.int64))


def _default_rng(dataset):
    return RngStream(dataset.seed, (PARTITION,))


def partition_iid(dataset, k, eval_fraction=0.2, rng=None, indices=None):
    idx = _resolve(dataset, indices)
    rng = rng or _default_rng(dataset)
    if k < 1 or k > idx.size:
        raise ValueError(f"cannot split {idx.size} examples over {k} clients")
    shuffled = idx[rng.child(0).generator().permutation(idx.size)]
    base, extra = divmod(idx.size, k)
    sizes = [base + (1 if c < extra else 0) for c in range(k)]
    bounds = np.cumsum([0] + sizes)
    clients = []
    for c in range(k):
        chunk = shuffled[bounds[c] : bounds[c + 1]]
        clients.append(ClientSplit(*split_train_eval(chunk, eval_fraction, rng.child(EVAL_SPLIT, c))))
    return Partition(tuple(clients), kind="iid")


def partition_shards(dataset, num_shards, shards_per_client, k, eval_fraction=0.2, rng=None, indices=None):
    """Sort by label, cut into contiguous shards, deal ``shards_per_client`` random shards per client."""
    idx = _resolve(dataset, indices)
    rng = rng or _default_rng(dataset)
    if k < 1 or shards_per_client < 1 or num_shards != k * shards_per_client:
        raise ValueError(f"num_shards ({num_shards}) must equal clients ({k}) x shards_per_client ({shards_per_client})")
    if idx.size < num_shards:
        raise ValueError(f"{idx.size} examples cannot fill {num_shards} shards")
    by_label = idx[np.argsort(dataset.labels[idx], kind="stable")]
    shards = np.array_split(by_label, num_shards)
    order = rng.child(0).generator().permutation(num_shards)
    clients = []
    for c in range(k):
        own = np.concatenate([shards[s] for s in order[c * shards_per_client : (c + 1) * shards_per_client]])
        clients.append(ClientSplit(*split_train_eval(own, eval_fraction, rng.child(EVAL_SPLIT, c))))
    return Partition(tuple(clients), kind="shards")


def partition_domains(dataset, k, eval_fraction=0.2, rng=None, indices=None):
    """Domain ``d`` goes to client ``d % k``.

    The train/eval split is drawn per domain, so the union of eval sets does not
    depend on ``k``.
    """
    idx = _resolve(dataset, indices)
    rng = rng or _default_rng(dataset)
    if k < 1 or dataset.num_domains < k:
        raise ValueError(f"{dataset.num_domains} domains cannot cover {k} clients")
    trains = [[] for _ in range(k)]
    evals = [[] for _ in range(k)]
    for d in range(dataset.num_domains):
        members = idx[dataset.domains[idx] == d]
        if members.size == 0:
            continue
        tr, ev = split_train_eval(members, eval_fraction, rng.child(EVAL_SPLIT, d))
        trains[d % k].append(tr)
        evals[d % k].append(ev)
    clients = []
    for c in range(k):
        if not trains[c]:
            raise ValueError(f"client {c} received no data")
        clients.append(ClientSplit(np.sort(np.concatenate(trains[c])), np.sort(np.concatenate(evals[c]))))
    return Partition(tuple(clients), kind="domain")


def carve_pretrain_pool(dataset, fraction, rng):
    """Reserve ``fraction`` of every domain for central pretraining.

    Returns ``(pool, rest)`` sorted index arrays.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"pretrain fraction must be in (0, 1), got {fraction}")
    pool = []
    for d in range(dataset.num_domains):
        members = np.flatnonzero(dataset.domains == d)
        if members.size == 0:
            continue
        take = int(round(fraction * members.size))
        perm = rng.child(d).generator().permutation(members.size)
        pool.append(members[perm[:take]])
    pool = np.sort(np.concatenate(pool))
    rest = np.setdiff1d(np.arange(len(dataset)), pool)
    return pool, rest


def label_histogram(dataset, indices):
    h = np.bincount(dataset.labels[np.asarray(indices, dtype=np.int64)], minlength=dataset.num_classes).astype(np.float64)
    return h / max(h.sum(), 1.0)


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def mean_pairwise_tv(dataset, partition):
    hists = [label_histogram(dataset, c.all) for c in partition.clients]
    pairs = [(i, j) for i in range(len(hists)) for j in range(i + 1, len(hists))]
    if not pairs:
        return 0.0
    return float(np.mean([total_variation(hists[i], hists[j]) for i, j in pairs]))
