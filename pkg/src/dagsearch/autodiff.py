"""Reverse-mode differentiation on small dense float64 arrays.

Everything on a tape is a 2-D array; vectors are (1, d) rows and scalars
are (1, 1).  A Tape records primitives in execution order, which is a
valid topological order, so the backward sweep is a single reversed pass.
Also hosts the named parameter store, SPD solves with a jitter ladder,
and two tiny fixed-step optimizers.
"""

from __future__ import annotations

import hashlib
import json
from typing import Iterable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class FactorizationError(RuntimeError):
    """Raised when an SPD factorization fails even at the largest jitter."""


def _name_seed(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "big")


class ParamStore:
    """Named float64 tensors with seed-reproducible initialization.

    Each parameter's init stream is derived from (seed, name), so the
    creation order never changes the initial values.  Values are mutated
    in place by optimizers; shapes are fixed at creation.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._values: dict[str, np.ndarray] = {}

    def add(self, name: str, shape: tuple[int, ...], init: str = "glorot") -> np.ndarray:
        if name in self._values:
            raise ValueError(f"parameter {name!r} already exists")
        if len(shape) != 2:
            raise ValueError(f"parameters are 2-D, got shape {shape} for {name!r}")
        rng = np.random.default_rng([self.seed, _name_seed(name)])
        if init == "glorot":
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-a, a, size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self._values[name] = np.asarray(value, dtype=np.float64)
        return self._values[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self._values if n.startswith(prefix))

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: self._values[n].copy() for n in self.names(prefix)}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, v in snap.items():
            self._values[n][...] = v

    def save(self, path, extra: dict | None = None) -> None:
        """Checkpoint: parameter name -> row-major values, plus a header
        with the seed and format version."""
        header = {"seed": self.seed, "version": CHECKPOINT_VERSION}
        if extra:
            header.update(extra)
        arrays = {f"param/{n}": v for n, v in self._values.items()}
        arrays["__header__"] = np.frombuffer(
            json.dumps(header, sort_keys=True).encode(), dtype=np.uint8
        )
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        with np.load(path) as zf:
            header = json.loads(bytes(zf["__header__"].tobytes()).decode())
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('version')}")
            store = cls(seed=header["seed"])
            for key in zf.files:
                if key.startswith("param/"):
                    store._values[key[len("param/"):]] = np.asarray(zf[key], dtype=np.float64)
        return store, header


class Var:
    """One recorded value.  ``vjp`` maps the output gradient to a tuple of
    parent gradients (None entries are skipped)."""

    __slots__ = ("value", "parents", "vjp", "name", "tape")

    def __init__(self, value, parents=(), vjp=None, name=None, tape=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Recorder for one forward computation.  Single-owner while recording;
    the gradient map produced by ``backward`` is an independent snapshot."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._param_cache: dict[str, Var] = {}

    def _record(self, value, parents, vjp, name=None) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), tuple(parents), vjp, name, self)
        self.nodes.append(v)
        return v

    def leaf(self, value, name: str | None = None) -> Var:
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"tape values are 2-D, got shape {arr.shape}")
        return self._record(arr, (), None, name)

    def param(self, store: ParamStore, name: str) -> Var:
        # one leaf per parameter per tape so reuses accumulate into one grad
        if name not in self._param_cache:
            self._param_cache[name] = self.leaf(store[name], name)
        return self._param_cache[name]

    def constant(self, value) -> Var:
        return self.leaf(value)


def backward(tape: Tape, output: Var, seed: np.ndarray | None = None,
             params: ParamStore | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar output w.r.t. every named leaf on the tape.

    ``seed`` substitutes the initial output gradient (used internally to
    push externally computed adjoints through the tape); without it the
    output must be a (1, 1) scalar.  With ``params`` given, parameters the
    output never touched are reported as zeros.
    """
    if output.tape is not tape:
        raise ValueError("output does not belong to this tape")
    if seed is None:
        if output.value.size != 1:
            raise ValueError(f"output must be scalar, got shape {output.value.shape}")
        seed = np.ones_like(output.value)
    grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    out: dict[str, np.ndarray] = {}
    if params is not None:
        out = {n: np.zeros_like(params[n]) for n in params.names()}
    for node in tape.nodes:
        if node.name is not None and id(node) in grads:
            g = grads[id(node)]
            if node.name in out:
                out[node.name] = out[node.name] + g
            else:
                out[node.name] = g
    return out


def _same_tape(*vars_: Var) -> Tape:
    t = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not t:
            raise ValueError("operands recorded on different tapes")
    return t


def _check_cols(a: Var, b: Var) -> None:
    if a.value.shape[1] != b.value.shape[1]:
        raise ValueError(f"width mismatch: {a.value.shape} vs {b.value.shape}")


def _bcast_pair(a: Var, b: Var, op: str):
    # allowed: equal shapes, or b a (1, n) row broadcast over a's rows
    if a.value.shape == b.value.shape:
        return False
    if b.value.shape == (1, a.value.shape[1]):
        return True
    raise ValueError(f"{op}: incompatible shapes {a.value.shape} and {b.value.shape}")


def add(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    row = _bcast_pair(a, b, "add")
    vjp = (lambda g: (g, g.sum(axis=0, keepdims=True))) if row else (lambda g: (g, g))
    return t._record(a.value + b.value, (a, b), vjp)


def sub(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    row = _bcast_pair(a, b, "sub")
    vjp = (lambda g: (g, -g.sum(axis=0, keepdims=True))) if row else (lambda g: (g, -g))
    return t._record(a.value - b.value, (a, b), vjp)


def mul(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    row = _bcast_pair(a, b, "mul")
    av, bv = a.value, b.value
    if row:
        vjp = lambda g: (g * bv, (g * av).sum(axis=0, keepdims=True))
    else:
        vjp = lambda g: (g * bv, g * av)
    return t._record(av * bv, (a, b), vjp)


def scale(a: Var, c: float) -> Var:
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,))


def shift(a: Var, c: float) -> Var:
    return a.tape._record(a.value + c, (a,), lambda g: (g,))


def cmul(a: Var, const: np.ndarray) -> Var:
    const = np.asarray(const, dtype=np.float64)
    return a.tape._record(a.value * const, (a,), lambda g: (g * const,))


def matmul(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul: {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value
    return t._record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Var) -> Var:
    return a.tape._record(a.value.T, (a,), lambda g: (g.T,))


def affine(x: Var, w: Var, b: Var | None = None) -> Var:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape._record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Var) -> Var:
    y = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape._record(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape._record(a.value * mask, (a,), lambda g: (g * mask,))


def exp(a: Var) -> Var:
    y = np.exp(a.value)
    return a.tape._record(y, (a,), lambda g: (g * y,))


def log(a: Var) -> Var:
    av = a.value
    return a.tape._record(np.log(av), (a,), lambda g: (g / av,))


def softplus(a: Var) -> Var:
    av = a.value
    y = np.logaddexp(0.0, av)
    return a.tape._record(y, (a,), lambda g: (g / (1.0 + np.exp(-av)),))


def softmax(a: Var) -> Var:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - dot) * y,)

    return a.tape._record(y, (a,), vjp)


def log_softmax(a: Var) -> Var:
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def vjp(g):
        return (g - sm * g.sum(axis=1, keepdims=True),)

    return a.tape._record(y, (a,), vjp)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    t = _same_tape(x, gamma, beta)
    _check_cols(x, gamma)
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = (xv - mu) / s
    gv = gamma.value

    def vjp(g):
        gx = g * gv
        dx = (gx - gx.mean(axis=1, keepdims=True)
              - xhat * (gx * xhat).mean(axis=1, keepdims=True)) / s
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        return dx, dgamma, dbeta

    return t._record(xhat * gv + beta.value, (x, gamma, beta), vjp)


def concat_cols(parts: Sequence[Var]) -> Var:
    t = _same_tape(*parts)
    widths = [p.value.shape[1] for p in parts]
    offs = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offs[i]:offs[i + 1]] for i in range(len(parts)))

    return t._record(np.concatenate([p.value for p in parts], axis=1), parts, vjp)


def concat_rows(parts: Sequence[Var]) -> Var:
    t = _same_tape(*parts)
    heights = [p.value.shape[0] for p in parts]
    offs = np.cumsum([0] + heights)

    def vjp(g):
        return tuple(g[offs[i]:offs[i + 1], :] for i in range(len(parts)))

    return t._record(np.concatenate([p.value for p in parts], axis=0), parts, vjp)


def slice_cols(a: Var, lo: int, hi: int) -> Var:
    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, lo:hi] = g
        return (out,)

    return a.tape._record(a.value[:, lo:hi], (a,), vjp)


def tile_rows(a: Var, n: int) -> Var:
    if a.value.shape[0] != 1:
        raise ValueError("tile_rows expects a single row")
    return a.tape._record(
        np.repeat(a.value, n, axis=0), (a,), lambda g: (g.sum(axis=0, keepdims=True),)
    )


def sum_all(a: Var) -> Var:
    return a.tape._record(
        a.value.sum().reshape(1, 1), (a,), lambda g: (np.full_like(a.value, g[0, 0]),)
    )


def mean_all(a: Var) -> Var:
    n = a.value.size
    return a.tape._record(
        a.value.mean().reshape(1, 1), (a,), lambda g: (np.full_like(a.value, g[0, 0] / n),)
    )


def take(a: Var, r: int, c: int) -> Var:
    def vjp(g):
        out = np.zeros_like(a.value)
        out[r, c] = g[0, 0]
        return (out,)

    return a.tape._record(a.value[r, c].reshape(1, 1), (a,), vjp)


def attention(q: Var, k: Var, v: Var, n_heads: int) -> Var:
    """Scaled dot-product attention with ``n_heads`` head slices."""
    d = q.value.shape[1]
    if d % n_heads:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    dk = d // n_heads
    outs = []
    for h in range(n_heads):
        qh = slice_cols(q, h * dk, (h + 1) * dk)
        kh = slice_cols(k, h * dk, (h + 1) * dk)
        vh = slice_cols(v, h * dk, (h + 1) * dk)
        logits = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(dk))
        outs.append(matmul(softmax(logits), vh))
    return concat_cols(outs)


# --- SPD solves ------------------------------------------------------------

JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


def chol_factor(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a`` plus however much diagonal jitter the
    ladder needed.  Raises FactorizationError when even 1e-4 fails."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected square matrix, got {a.shape}")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-10):
        raise ValueError("matrix is not symmetric")
    eye = np.eye(a.shape[0])
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(a + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"factorization failed for {a.shape[0]}x{a.shape[0]} matrix even "
        f"with jitter {JITTER_LADDER[-1]:g}"
    )


def chol_solve(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_triangular

    y = solve_triangular(lower, b, lower=True)
    return solve_triangular(lower.T, y, lower=False)


def chol_logdet(lower: np.ndarray) -> float:
    return 2.0 * float(np.log(np.diag(lower)).sum())


def cholesky_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for SPD ``a`` via the jitter-laddered factorization."""
    lower, _ = chol_factor(a)
    return chol_solve(lower, np.asarray(b, dtype=np.float64))


# --- optimizers ------------------------------------------------------------


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm > 0:
        f = max_norm / total
        return {n: g * f for n, g in grads.items()}
    return grads


class Sgd:
    """Fixed-step (stochastic) gradient method; set maximize=True for ascent."""

    def __init__(self, lr: float, maximize: bool = False, clip: float = 0.0):
        self.lr = lr
        self.sign = 1.0 if maximize else -1.0
        self.clip = clip

    def step(self, store: ParamStore, grads: dict[str, np.ndarray],
             names: Iterable[str]) -> None:
        names = list(names)
        if self.clip:
            grads = clip_gradients({n: grads[n] for n in names}, self.clip)
        for n in names:
            store[n][...] += self.sign * self.lr * grads[n]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, store: ParamStore, grads: dict[str, np.ndarray],
             names: Iterable[str]) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for n in names:
            g = grads[n]
            m = self._m.setdefault(n, np.zeros_like(g))
            v = self._v.setdefault(n, np.zeros_like(g))
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** self._t)
            vhat = v / (1 - b2 ** self._t)
            store[n][...] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
