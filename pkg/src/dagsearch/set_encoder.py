"""Permutation-invariant dataset encoder.

Two stacked attention modules: the first turns each class's sampled
instances into a class prototype, the second pools the prototype set into
one task embedding.  Each module is two self-attention blocks followed by
attention pooling onto a single learnable seed row, so the embedding is
invariant to class order and instance order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Var


@dataclass
class TaskSpec:
    """A classification task given as per-class instance matrices."""

    task_id: str
    classes: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError(f"task {self.task_id!r} needs >= 2 classes")
        widths = {c.shape[1] for c in self.classes}
        if len(widths) != 1:
            raise ValueError(f"task {self.task_id!r} has mixed feature widths {widths}")
        for i, c in enumerate(self.classes):
            if c.shape[0] < 1:
                raise ValueError(f"task {self.task_id!r} class {i} is empty")

    @property
    def dim(self) -> int:
        return self.classes[0].shape[1]


def build_set_encoder_params(store: ParamStore, d_in: int, d_model: int = 56,
                             heads: int = 4, prefix: str = "dset.") -> None:
    if d_model % heads:
        raise ValueError(f"model width {d_model} not divisible by {heads} heads")
    store.add(f"{prefix}proj.w", (d_in, d_model))
    store.add(f"{prefix}proj.b", (1, d_model), init="zeros")
    for mod in ("m1", "m2"):
        for blk in ("sab0", "sab1"):
            _add_block(store, f"{prefix}{mod}.{blk}.", d_model)
        p = f"{prefix}{mod}.pma."
        store.add(p + "seed", (1, d_model))
        store.add(p + "vw1", (d_model, d_model))
        store.add(p + "vb1", (1, d_model), init="zeros")
        store.add(p + "vw2", (d_model, d_model))
        store.add(p + "vb2", (1, d_model), init="zeros")
        _add_block(store, p, d_model)


def _add_block(store: ParamStore, p: str, d: int) -> None:
    for w in ("wq", "wk", "wv", "wo"):
        store.add(p + w, (d, d))
    store.add(p + "ln1g", (1, d), init="ones")
    store.add(p + "ln1b", (1, d), init="zeros")
    store.add(p + "fw1", (d, d))
    store.add(p + "fb1", (1, d), init="zeros")
    store.add(p + "fw2", (d, d))
    store.add(p + "fb2", (1, d), init="zeros")
    store.add(p + "ln2g", (1, d), init="ones")
    store.add(p + "ln2b", (1, d), init="zeros")


def _mh(tape: Tape, store: ParamStore, p: str, q: Var, k: Var, v: Var, heads: int) -> Var:
    att = ad.attention(
        ad.matmul(q, tape.param(store, p + "wq")),
        ad.matmul(k, tape.param(store, p + "wk")),
        ad.matmul(v, tape.param(store, p + "wv")),
        n_heads=heads,
    )
    return ad.matmul(att, tape.param(store, p + "wo"))


def _residual_ff(tape: Tape, store: ParamStore, p: str, h: Var) -> Var:
    ff = ad.affine(ad.relu(ad.affine(h, tape.param(store, p + "fw1"),
                                     tape.param(store, p + "fb1"))),
                   tape.param(store, p + "fw2"), tape.param(store, p + "fb2"))
    return ad.layer_norm(ad.add(h, ff), tape.param(store, p + "ln2g"),
                         tape.param(store, p + "ln2b"))


def sab_node(tape: Tape, store: ParamStore, p: str, y: Var, heads: int) -> Var:
    """Self-attention block: LN(H + FF(H)), H = LN(Y + MH(Y, Y, Y))."""
    h = ad.layer_norm(ad.add(y, _mh(tape, store, p, y, y, y, heads)),
                      tape.param(store, p + "ln1g"), tape.param(store, p + "ln1b"))
    return _residual_ff(tape, store, p, h)


def pma_node(tape: Tape, store: ParamStore, p: str, y: Var, heads: int) -> Var:
    """Pool a set onto the single learnable seed row:
    LN(H + FF(H)), H = LN(R + MH(R, FF(Y), FF(Y)))."""
    r = tape.param(store, p + "seed")
    fy = ad.affine(ad.relu(ad.affine(y, tape.param(store, p + "vw1"),
                                     tape.param(store, p + "vb1"))),
                   tape.param(store, p + "vw2"), tape.param(store, p + "vb2"))
    h = ad.layer_norm(ad.add(r, _mh(tape, store, p, r, fy, fy, heads)),
                      tape.param(store, p + "ln1g"), tape.param(store, p + "ln1b"))
    return _residual_ff(tape, store, p, h)


def sab(y: np.ndarray, store: ParamStore, prefix: str = "dset.m1.sab0.",
        heads: int = 4) -> np.ndarray:
    """Self-attention block over a set matrix; rows may be permuted freely."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError(f"expected a non-empty set matrix, got shape {y.shape}")
    tape = Tape()
    return sab_node(tape, store, prefix, tape.leaf(y), heads).value.copy()


def pma(y: np.ndarray, store: ParamStore, prefix: str = "dset.m1.pma.",
        heads: int = 4) -> np.ndarray:
    """Attention pooling of a set matrix onto one output vector."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError(f"expected a non-empty set matrix, got shape {y.shape}")
    tape = Tape()
    return pma_node(tape, store, prefix, tape.leaf(y), heads).value.copy()[0]


def _class_sample(cls: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Draw k instances from one class, invariantly to row order.

    Rows are first put in canonical (lexicographic) order and the draw is
    seeded from the class content, so reordering classes or instances never
    changes what gets sampled.  Classes smaller than k are sampled with
    replacement; a class of exactly k rows is taken whole.
    """
    order = np.lexsort(cls.T[::-1])
    m = np.ascontiguousarray(cls[order])
    n = m.shape[0]
    if k == n:
        return m
    digest = hashlib.blake2b(m.tobytes(), digest_size=8).digest()
    rng = np.random.default_rng([seed, int.from_bytes(digest, "big")])
    idx = rng.choice(n, size=k, replace=(k > n))
    return m[idx]


def encode_dataset_node(tape: Tape, task: TaskSpec, store: ParamStore,
                        samples_per_class: int = 10, seed: int = 0,
                        prefix: str = "dset.", heads: int = 4) -> Var:
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    protos = []
    for cls in task.classes:
        x = _class_sample(cls, samples_per_class, seed)
        y = ad.affine(tape.leaf(x), tape.param(store, f"{prefix}proj.w"),
                      tape.param(store, f"{prefix}proj.b"))
        y = sab_node(tape, store, f"{prefix}m1.sab0.", y, heads)
        y = sab_node(tape, store, f"{prefix}m1.sab1.", y, heads)
        protos.append(pma_node(tape, store, f"{prefix}m1.pma.", y, heads))
    y = ad.concat_rows(protos)
    y = sab_node(tape, store, f"{prefix}m2.sab0.", y, heads)
    y = sab_node(tape, store, f"{prefix}m2.sab1.", y, heads)
    return pma_node(tape, store, f"{prefix}m2.pma.", y, heads)


def encode_dataset(task: TaskSpec, store: ParamStore, samples_per_class: int = 10,
                   seed: int = 0, prefix: str = "dset.", heads: int = 4) -> np.ndarray:
    """Task embedding as a 1-D vector of the model width."""
    tape = Tape()
    out = encode_dataset_node(tape, task, store, samples_per_class, seed, prefix, heads)
    return out.value.copy()[0]


def write_task_file(task: TaskSpec, path) -> None:
    """One header line, then ``<class-index> <v_0> ... <v_{d-1}>`` per instance."""
    with open(path, "w") as fh:
        fh.write(f"task {task.task_id} classes={len(task.classes)} dim={task.dim}\n")
        for ci, cls in enumerate(task.classes):
            for row in cls:
                fh.write(f"{ci} " + " ".join(repr(float(v)) for v in row) + "\n")


def read_task_file(path) -> TaskSpec:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "task":
            raise ValueError(f"{path}: bad task header {' '.join(header)!r}")
        task_id = header[1]
        n_classes = int(header[2].split("=")[1])
        dim = int(header[3].split("=")[1])
        rows: dict[int, list[list[float]]] = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(parts)}")
            rows.setdefault(int(parts[0]), []).append([float(v) for v in parts[1:]])
    classes = [np.array(rows[ci], dtype=np.float64) for ci in range(n_classes)]
    return TaskSpec(task_id=task_id, classes=classes)


class DatasetEncoder(BaseEstimator, TransformerMixin):
    """Estimator facade over the task encoder.

    Parameters live in an externally trained ParamStore; ``fit`` is a no-op
    so the encoder can sit inside pipelines.
    """

    def __init__(self, store: ParamStore, samples_per_class: int = 10, seed: int = 0,
                 prefix: str = "dset.", heads: int = 4):
        self.store = store
        self.samples_per_class = samples_per_class
        self.seed = seed
        self.prefix = prefix
        self.heads = heads

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        """Encode one TaskSpec or a list of them."""
        if isinstance(X, TaskSpec):
            return self._encode(X)
        return np.stack([self._encode(t) for t in X])

    def _encode(self, task: TaskSpec) -> np.ndarray:
        return encode_dataset(task, self.store, self.samples_per_class,
                              self.seed, self.prefix, self.heads)
