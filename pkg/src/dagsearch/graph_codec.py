"""Graph autoencoder for architecture cells.

The encoder runs gated GRU message passing over the DAG twice (forward
along edges, then along the reversed edges), concatenates the two final
hidden states and maps them to a fixed-width latent vector.  The decoder
grows a graph node by node from a latent: an operation classifier picks
each new node's tag (or the termination symbol) and an edge scorer wires
it to earlier nodes, with the hidden state of the new node refreshed
after every accepted edge.  Decoding is greedy and total: every latent
yields a valid cell.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from .autodiff import Adam, ParamStore, Tape, Var
from .cells import (
    CellGraph,
    N_MAX,
    OpKind,
    SEARCHABLE_OPS,
    topological_order,
    validate,
)

_ONE_HOT = np.eye(len(OpKind), dtype=np.float64)
_END_CLASS = len(SEARCHABLE_OPS)  # decoder classes: 5 ops then END

_GRU_KEYS = ("wr", "ur", "br", "wz", "uz", "bz", "wn", "un", "bn")


def build_graph_codec_params(store: ParamStore, d_latent: int = 56,
                             hidden: int = 64, prefix: str = "gvae.") -> None:
    n_tags = len(OpKind)
    for side in ("enc.f", "enc.r", "dec"):
        p = f"{prefix}{side}."
        for k in ("wr", "wz", "wn"):
            store.add(p + k, (n_tags, hidden))
        for k in ("ur", "uz", "un"):
            store.add(p + k, (hidden, hidden))
        for k in ("br", "bz", "bn"):
            store.add(p + k, (1, hidden), init="zeros")
        store.add(p + "gate.w", (hidden, hidden))
        store.add(p + "gate.b", (1, hidden), init="zeros")
        store.add(p + "map.w", (hidden, hidden))
    store.add(f"{prefix}enc.f.h0", (1, hidden))
    store.add(f"{prefix}enc.r.h0", (1, hidden))
    store.add(f"{prefix}enc.out.w1", (2 * hidden, hidden))
    store.add(f"{prefix}enc.out.b1", (1, hidden), init="zeros")
    store.add(f"{prefix}enc.out.w2", (hidden, d_latent))
    store.add(f"{prefix}enc.out.b2", (1, d_latent), init="zeros")
    store.add(f"{prefix}dec.init.w", (d_latent, hidden))
    store.add(f"{prefix}dec.init.b", (1, hidden), init="zeros")
    store.add(f"{prefix}dec.node.w1", (hidden, hidden))
    store.add(f"{prefix}dec.node.b1", (1, hidden), init="zeros")
    store.add(f"{prefix}dec.node.w2", (hidden, _END_CLASS + 1))
    store.add(f"{prefix}dec.node.b2", (1, _END_CLASS + 1), init="zeros")
    store.add(f"{prefix}dec.edge.w1", (2 * hidden, hidden))
    store.add(f"{prefix}dec.edge.b1", (1, hidden), init="zeros")
    store.add(f"{prefix}dec.edge.w2", (hidden, 1))
    store.add(f"{prefix}dec.edge.b2", (1, 1), init="zeros")


def _gru_node(tape: Tape, store: ParamStore, p: str, x: Var, h: Var) -> Var:
    pp = lambda k: tape.param(store, p + k)
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, pp("wr")), ad.matmul(h, pp("ur"))), pp("br")))
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, pp("wz")), ad.matmul(h, pp("uz"))), pp("bz")))
    n = ad.tanh(ad.add(ad.add(ad.matmul(x, pp("wn")), ad.mul(r, ad.matmul(h, pp("un")))), pp("bn")))
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


def _message_node(tape: Tape, store: ParamStore, p: str, hs: list[Var]) -> Var:
    """Gated sum over neighbor states: sum of gate(h) * map(h)."""
    terms = [
        ad.mul(ad.sigmoid(ad.affine(h, tape.param(store, p + "gate.w"),
                                    tape.param(store, p + "gate.b"))),
               ad.matmul(h, tape.param(store, p + "map.w")))
        for h in hs
    ]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def _onehot_rows(tags) -> np.ndarray:
    return _ONE_HOT[[int(t) for t in tags]]


def encode_node(tape: Tape, g: CellGraph, store: ParamStore,
                prefix: str = "gvae.") -> Var:
    """Latent of one cell as a (1, d_latent) tape node."""
    validate(g)
    order = topological_order(g)
    finals = []
    for side, neigh, sweep in (
        ("enc.f", g.predecessors, order),
        ("enc.r", g.successors, order[::-1]),
    ):
        p = f"{prefix}{side}."
        h: dict[int, Var] = {}
        for v in sweep:
            x = tape.constant(_onehot_rows([g.nodes[v]]))
            nbrs = neigh(v)
            if nbrs:
                h_in = _message_node(tape, store, p, [h[u] for u in nbrs])
            else:
                h_in = tape.param(store, p + "h0")
            h[v] = _gru_node(tape, store, p, x, h_in)
        finals.append(h[sweep[-1]])
    hg = ad.concat_cols(finals)
    hid = ad.tanh(ad.affine(hg, tape.param(store, f"{prefix}enc.out.w1"),
                            tape.param(store, f"{prefix}enc.out.b1")))
    return ad.affine(hid, tape.param(store, f"{prefix}enc.out.w2"),
                     tape.param(store, f"{prefix}enc.out.b2"))


def encode_graph(g: CellGraph, store: ParamStore, prefix: str = "gvae.") -> np.ndarray:
    """Latent of one cell as a 1-D vector."""
    tape = Tape()
    return encode_node(tape, g, store, prefix).value.copy()[0]


def _gru_np(P, x, h):
    r = _sig(x @ P["wr"] + h @ P["ur"] + P["br"])
    z = _sig(x @ P["wz"] + h @ P["uz"] + P["bz"])
    n = np.tanh(x @ P["wn"] + r * (h @ P["un"]) + P["bn"])
    return n + z * (h - n)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _message_np(P, hs):
    acc = None
    for h in hs:
        t = _sig(h @ P["gate.w"] + P["gate.b"]) * (h @ P["map.w"])
        acc = t if acc is None else acc + t
    return acc


def _side_params(store, prefix, side):
    keys = _GRU_KEYS + ("gate.w", "gate.b", "map.w")
    return {k: store[f"{prefix}{side}.{k}"] for k in keys}


def encode_graphs(graphs, store: ParamStore, prefix: str = "gvae.") -> np.ndarray:
    """Latents for many cells, vectorized across graphs that share one edge
    structure (the enumerated space is a single group).  Matches
    encode_graph to floating-point accuracy."""
    m = len(graphs)
    d_latent = store[f"{prefix}enc.out.w2"].shape[1]
    out = np.empty((m, d_latent))
    groups: dict[tuple, list[int]] = {}
    for i, g in enumerate(graphs):
        groups.setdefault((len(g.nodes), tuple(sorted(g.edges))), []).append(i)
    for (n, edges), idxs in groups.items():
        batch = [graphs[i] for i in idxs]
        validate(batch[0])
        preds: list[list[int]] = [[] for _ in range(n)]
        succs: list[list[int]] = [[] for _ in range(n)]
        for (u, v) in edges:
            preds[v].append(u)
            succs[u].append(v)
        order = _index_topo_order(n, preds)
        b = len(batch)
        finals = []
        for side, neigh, sweep in (("enc.f", preds, order), ("enc.r", succs, order[::-1])):
            P = _side_params(store, prefix, side)
            h0 = store[f"{prefix}{side}.h0"]
            h: dict[int, np.ndarray] = {}
            for v in sweep:
                x = _ONE_HOT[[int(g.nodes[v]) for g in batch]]
                nbrs = sorted(neigh[v])
                h_in = _message_np(P, [h[u] for u in nbrs]) if nbrs else np.repeat(h0, b, axis=0)
                h[v] = _gru_np(P, x, h_in)
            finals.append(h[sweep[-1]])
        hg = np.concatenate(finals, axis=1)
        hid = np.tanh(hg @ store[f"{prefix}enc.out.w1"] + store[f"{prefix}enc.out.b1"])
        out[idxs] = hid @ store[f"{prefix}enc.out.w2"] + store[f"{prefix}enc.out.b2"]
    return out


def _index_topo_order(n, preds):
    indeg = [len(p) for p in preds]
    succs = [[] for _ in range(n)]
    for v, ps in enumerate(preds):
        for u in ps:
            succs[u].append(v)
    ready = sorted(v for v in range(n) if indeg[v] == 0)
    order = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        for w in sorted(succs[v]):
            indeg[w] -= 1
            if indeg[w] == 0:
                ready.append(w)
    return order


def decode_latent(z: np.ndarray, store: ParamStore, prefix: str = "gvae.",
                  n_max: int = N_MAX) -> CellGraph:
    """Greedy decode of a latent vector into a valid cell.

    Nodes are added until the classifier emits the termination symbol or
    the node budget forces it; the final node is OUTPUT and adopts every
    dangling leaf.  A node whose edge scores all fall below 0.5 still gets
    its single best edge, so the result is always connected.
    """
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(z)):
        raise ValueError("latent vector has non-finite entries")
    P = _side_params(store, prefix, "dec")
    w_init, b_init = store[f"{prefix}dec.init.w"], store[f"{prefix}dec.init.b"]
    h0 = np.tanh(z @ w_init + b_init)
    nodes = [OpKind.INPUT]
    edges: list[tuple[int, int]] = []
    h = [_gru_np(P, _onehot_rows([OpKind.INPUT]), h0)]
    while True:
        k = len(nodes)
        choice = int(np.argmax(_node_logits_np(store, prefix, h[k - 1])))
        if choice == _END_CLASS or k == n_max - 1:
            has_succ = {u for (u, _) in edges}
            leaves = [v for v in range(k) if v not in has_succ]
            nodes.append(OpKind.OUTPUT)
            edges.extend((v, k) for v in leaves)
            return CellGraph(nodes=tuple(nodes), edges=frozenset(edges))
        tag = SEARCHABLE_OPS[choice]
        nodes.append(tag)
        x = _onehot_rows([tag])
        h.append(_gru_np(P, x, np.zeros_like(h0)))
        accepted: list[int] = []
        best_u, best_p = k - 1, -1.0
        for u in range(k - 1, -1, -1):
            pair = np.concatenate([h[u], h[k]], axis=1)
            p = _edge_prob_np(store, prefix, pair)
            if p > best_p:
                best_u, best_p = u, p
            if p >= 0.5:
                accepted.append(u)
                edges.append((u, k))
                h[k] = _gru_np(P, x, _message_np(P, [h[v] for v in sorted(accepted)]))
        if not accepted:
            edges.append((best_u, k))
            h[k] = _gru_np(P, x, _message_np(P, [h[best_u]]))


def _node_logits_np(store, prefix, hk):
    hid = np.maximum(hk @ store[f"{prefix}dec.node.w1"] + store[f"{prefix}dec.node.b1"], 0.0)
    return hid @ store[f"{prefix}dec.node.w2"] + store[f"{prefix}dec.node.b2"]


def _edge_prob_np(store, prefix, pair):
    hid = np.maximum(pair @ store[f"{prefix}dec.edge.w1"] + store[f"{prefix}dec.edge.b1"], 0.0)
    return _sig(hid @ store[f"{prefix}dec.edge.w2"] + store[f"{prefix}dec.edge.b2"]).item()


def _node_logits_node(tape, store, prefix, hk: Var) -> Var:
    hid = ad.relu(ad.affine(hk, tape.param(store, f"{prefix}dec.node.w1"),
                            tape.param(store, f"{prefix}dec.node.b1")))
    return ad.affine(hid, tape.param(store, f"{prefix}dec.node.w2"),
                     tape.param(store, f"{prefix}dec.node.b2"))


def _edge_logits_node(tape, store, prefix, pairs: Var) -> Var:
    hid = ad.relu(ad.affine(pairs, tape.param(store, f"{prefix}dec.edge.w1"),
                            tape.param(store, f"{prefix}dec.edge.b1")))
    return ad.affine(hid, tape.param(store, f"{prefix}dec.edge.w2"),
                     tape.param(store, f"{prefix}dec.edge.b2"))


def teacher_forcing_loss_node(tape: Tape, g: CellGraph, latent: np.ndarray,
                              store: ParamStore, prefix: str = "gvae.") -> Var:
    """Reconstruction loss of one cell under teacher forcing.

    Replays the decoder along the ground-truth node order, scoring the
    operation choice of every step (cross-entropy; the OUTPUT step trains
    the termination symbol) and every possible incoming edge (binary
    cross-entropy).  Ground truth drives the state updates, so step k is
    conditioned on a correct prefix.  Candidate edges between two true
    edges share a hidden state and are scored as one batch.
    """
    order = topological_order(g)
    pos = {v: i for i, v in enumerate(order)}
    tags = [g.nodes[v] for v in order]
    true_preds = [frozenset(pos[u] for u in g.predecessors(v)) for v in order]
    n = len(order)

    P = f"{prefix}dec."
    z = tape.constant(np.asarray(latent, dtype=np.float64).reshape(1, -1))
    h0 = ad.tanh(ad.affine(z, tape.param(store, P + "init.w"),
                           tape.param(store, P + "init.b")))
    zero_h = tape.constant(np.zeros((1, h0.shape[1])))
    h = [_gru_node(tape, store, P, tape.constant(_onehot_rows([OpKind.INPUT])), h0)]
    terms = []
    for k in range(1, n):
        target = _END_CLASS if tags[k] == OpKind.OUTPUT else SEARCHABLE_OPS.index(tags[k])
        logits = _node_logits_node(tape, store, prefix, h[k - 1])
        terms.append(ad.scale(ad.take(ad.log_softmax(logits), 0, target), -1.0))
        if tags[k] == OpKind.OUTPUT:
            break  # true leaves adopt OUTPUT deterministically; nothing to score
        x = tape.constant(_onehot_rows([tags[k]]))
        hk = _gru_node(tape, store, P, x, zero_h)
        current: list[int] = []
        segment: list[int] = []

        def flush(hk, segment):
            rows = ad.concat_rows([h[u] for u in segment])
            pairs = ad.concat_cols([rows, ad.tile_rows(hk, len(segment))])
            logit = _edge_logits_node(tape, store, prefix, pairs)
            t_vec = np.array([[1.0] if u in true_preds[k] else [0.0] for u in segment])
            bce = ad.sub(ad.softplus(logit), ad.cmul(logit, t_vec))
            terms.append(ad.sum_all(bce))

        for u in range(k - 1, -1, -1):
            segment.append(u)
            if u in true_preds[k]:
                flush(hk, segment)
                segment = []
                current.append(u)
                hk = _gru_node(tape, store, P, x,
                               _message_node(tape, store, P, [h[v] for v in sorted(current)]))
        if segment:
            flush(hk, segment)
        h.append(hk)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def teacher_forcing_loss(g: CellGraph, latent: np.ndarray, store: ParamStore,
                         prefix: str = "gvae.") -> float:
    tape = Tape()
    return teacher_forcing_loss_node(tape, g, latent, store, prefix).value.item()


def train_autoencoder(graphs, store: ParamStore, epochs: int = 300,
                      lr: float = 2e-3, prefix: str = "gvae.") -> tuple[ParamStore, list[float]]:
    """Teacher-forced decoder training against the frozen encoder.

    Latents come from the current (frozen) encoder; only ``dec.`` weights
    move.  Returns the store and a loss curve whose first entry is the
    untouched-parameters loss and whose later entries are per-epoch means.
    """
    graphs = list(graphs)
    if not graphs:
        raise ValueError("training set is empty")
    latents = [encode_graph(g, store, prefix) for g in graphs]
    dec_names = store.names(prefix=f"{prefix}dec.")
    opt = Adam(lr=lr)
    curve = [float(np.mean([teacher_forcing_loss(g, z, store, prefix)
                            for g, z in zip(graphs, latents)]))]
    for _ in range(epochs):
        epoch_losses = []
        for g, z in zip(graphs, latents):
            tape = Tape()
            loss = teacher_forcing_loss_node(tape, g, z, store, prefix)
            grads = ad.backward(tape, loss)
            opt.step(store, grads, [n for n in dec_names if n in grads])
            epoch_losses.append(loss.value.item())
        curve.append(float(np.mean(epoch_losses)))
    return store, curve


class GraphAutoencoder(BaseEstimator, TransformerMixin):
    """Estimator facade: ``transform`` encodes cells to latents,
    ``inverse_transform`` decodes latents to cells, ``fit`` trains the
    decoder against the frozen encoder."""

    def __init__(self, store: ParamStore, epochs: int = 300, lr: float = 2e-3,
                 n_max: int = N_MAX, prefix: str = "gvae."):
        self.store = store
        self.epochs = epochs
        self.lr = lr
        self.n_max = n_max
        self.prefix = prefix

    def fit(self, X, y=None):
        _, curve = train_autoencoder(X, self.store, self.epochs, self.lr, self.prefix)
        self.loss_curve_ = curve
        return self

    def transform(self, X) -> np.ndarray:
        return encode_graphs(list(X), self.store, self.prefix)

    def inverse_transform(self, Z) -> list[CellGraph]:
        return [decode_latent(z, self.store, self.prefix, self.n_max)
                for z in np.atleast_2d(np.asarray(Z))]
