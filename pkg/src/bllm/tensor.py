"""Dense float64 matrices with a recording tape for reverse-mode gradients.

Every trainable computation in the package is built from the small op set
here. Each op has a hand-written backward rule; ``grad_check`` validates
any composition of them against central finite differences. All storage
and accumulation is 64-bit, so results are deterministic given inputs.

Gradient recording: while a :class:`Tape` is active, each op whose inputs
participate in the graph appends one backward closure. ``Tape.backward``
replays the closures in exact reverse order of recording. Leaves only
accumulate gradients when ``requires_grad`` is set, so frozen parameters
end a backward pass with a gradient that is exactly zero (``None``).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GradientError, ShapeError

_MASK64 = (1 << 64) - 1


class Matrix:
    """A rows x cols array of float64, row-major.

    ``data`` exposes the flat row-major buffer; ``grad`` holds the
    accumulated gradient (or ``None``, meaning exactly zero).
    """

    __slots__ = ("a", "grad", "requires_grad", "name", "_in_graph")

    def __init__(self, values, requires_grad=False, name=""):
        a = np.array(values, dtype=np.float64, order="C")
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise ShapeError(f"Matrix must be 2-D, got shape {a.shape}")
        self.a = a
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._in_graph = False

    # -- shape / buffer access -------------------------------------------
    @property
    def rows(self):
        return self.a.shape[0]

    @property
    def cols(self):
        return self.a.shape[1]

    @property
    def shape(self):
        return self.a.shape

    @property
    def data(self):
        return self.a.reshape(-1)

    def item(self):
        if self.a.size != 1:
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.a.shape}")
        return float(self.a[0, 0])

    def copy(self):
        return Matrix(self.a.copy(), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Matrix({self.rows}x{self.cols}{tag})"


def _fresh(values):
    m = Matrix.__new__(Matrix)
    m.a = values
    m.grad = None
    m.requires_grad = False
    m.name = ""
    m._in_graph = False
    return m


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of backward closures, replayed strictly in reverse."""

    def __init__(self):
        self._entries = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)

    def backward(self, loss):
        """Seed d(loss)/d(loss)=1 and propagate through recorded ops."""
        if loss.a.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 loss, got {loss.a.shape}")
        loss.grad = np.ones((1, 1))
        for entry in reversed(self._entries):
            entry()


def _tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _participates(m):
    return m.requires_grad or m._in_graph


def _accum(m, g):
    if not _participates(m):
        return
    if m.grad is None:
        m.grad = np.zeros_like(m.a)
    m.grad += g


def _record(out, inputs, backward):
    """Attach a backward closure if a tape is active and any input needs it."""
    t = _tape()
    if t is not None and any(_participates(m) for m in inputs):
        out._in_graph = True

        def entry():
            if out.grad is not None:
                backward(out.grad)

        t._entries.append(entry)
    return out


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product; differentiable through the tape."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    out = _fresh(a.a @ b.a)

    def backward(g):
        _accum(a, g @ b.a.T)
        _accum(b, a.a.T @ g)

    return _record(out, (a, b), backward)


def transpose(x: Matrix) -> Matrix:
    out = _fresh(np.ascontiguousarray(x.a.T))

    def backward(g):
        _accum(x, g.T)

    return _record(out, (x,), backward)


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    out = _fresh(a.a + b.a)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), backward)


def add_rowvec(x: Matrix, v: Matrix) -> Matrix:
    """Add a 1 x cols row vector to every row of x."""
    if v.rows != 1 or v.cols != x.cols:
        raise ShapeError(f"add_rowvec: {x.shape} + {v.shape}")
    out = _fresh(x.a + v.a)

    def backward(g):
        _accum(x, g)
        _accum(v, g.sum(axis=0, keepdims=True))

    return _record(out, (x, v), backward)


def scale(x: Matrix, s: float) -> Matrix:
    s = float(s)
    out = _fresh(x.a * s)

    def backward(g):
        _accum(x, g * s)

    return _record(out, (x,), backward)


def add_const(x: Matrix, c) -> Matrix:
    """Add a constant array (no gradient flows into the constant)."""
    out = _fresh(x.a + c)

    def backward(g):
        _accum(x, g)

    return _record(out, (x,), backward)


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}")
    out = _fresh(a.a * b.a)

    def backward(g):
        _accum(a, g * b.a)
        _accum(b, g * a.a)

    return _record(out, (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Matrix) -> Matrix:
    """Tanh-form GELU. Smooth, so finite-difference checks stay tight."""
    inner = _GELU_C * (x.a + 0.044715 * x.a ** 3)
    t = np.tanh(inner)
    out = _fresh(0.5 * x.a * (1.0 + t))

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x.a ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x.a * (1.0 - t ** 2) * dinner
        _accum(x, g * d)

    return _record(out, (x,), backward)


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax. Row max is subtracted first, so arbitrary shifts
    per row cannot overflow and do not change the result."""
    shifted = m.a - m.a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = _fresh(p)

    def backward(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        _accum(m, p * (g - dot))

    return _record(out, (m,), backward)


def layer_norm(x: Matrix, gamma: Matrix, beta: Matrix, eps: float = 1e-5) -> Matrix:
    """Row-wise layer normalization with learned scale/shift (1 x cols)."""
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.a.mean(axis=1, keepdims=True)
    xc = x.a - mu
    var = (xc ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _fresh(xhat * gamma.a + beta.a)
    n = x.cols

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=0, keepdims=True))
        _accum(beta, g.sum(axis=0, keepdims=True))
        gx = g * gamma.a
        # d/dx of (x - mu) * inv, with mu and inv both functions of x
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        _accum(x, dx)

    return _record(out, (x, gamma, beta), backward)


def gather_rows(x: Matrix, idx) -> Matrix:
    """Select rows by index (duplicates allowed); backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise IndexError(f"gather_rows: index out of range 0..{x.rows - 1}")
    out = _fresh(x.a[idx].copy())

    def backward(g):
        if not _participates(x):
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.a)
        np.add.at(x.grad, idx, g)

    return _record(out, (x,), backward)


def concat_rows(parts) -> Matrix:
    parts = list(parts)
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ShapeError(f"concat_rows: column mismatch {p.cols} vs {cols}")
    out = _fresh(np.concatenate([p.a for p in parts], axis=0))
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])

    return _record(out, tuple(parts), backward)


def slice_cols(x: Matrix, lo: int, hi: int) -> Matrix:
    if not (0 <= lo < hi <= x.cols):
        raise ShapeError(f"slice_cols: [{lo}:{hi}] of {x.cols} columns")
    out = _fresh(x.a[:, lo:hi].copy())

    def backward(g):
        if not _participates(x):
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.a)
        x.grad[:, lo:hi] += g

    return _record(out, (x,), backward)


def concat_cols(parts) -> Matrix:
    parts = list(parts)
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(f"concat_cols: row mismatch {p.rows} vs {rows}")
    out = _fresh(np.concatenate([p.a for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, lo:hi])

    return _record(out, tuple(parts), backward)


def merge_rows(x: Matrix, k: int) -> Matrix:
    """Concatenate every k adjacent rows into one row of width k*cols.

    Row i of the output is rows k*i .. k*i+k-1 of the input, in order.
    """
    if x.rows % k != 0:
        raise ShapeError(f"merge_rows: {x.rows} rows not divisible by {k}")
    out = _fresh(x.a.reshape(x.rows // k, k * x.cols).copy())

    def backward(g):
        _accum(x, g.reshape(x.rows, x.cols))

    return _record(out, (x,), backward)


def cross_entropy(logits: Matrix, targets) -> Matrix:
    """Mean over rows of -log softmax(logits)[target]. Returns 1x1."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 1 or targets.size != logits.rows:
        raise ShapeError(
            f"cross_entropy: {logits.rows} rows but {targets.size} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.cols):
        raise IndexError(
            f"cross_entropy: target index out of range 0..{logits.cols - 1}")
    shifted = logits.a - logits.a.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.rows)
    nll = logz - shifted[rows, targets]
    out = _fresh(np.array([[nll.mean()]]))

    def backward(g):
        s = float(g[0, 0]) / logits.rows
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, targets] -= 1.0
        _accum(logits, p * s)

    return _record(out, (logits,), backward)


def sum_scalars(parts) -> Matrix:
    """Sum a list of 1x1 matrices into one 1x1 matrix."""
    parts = list(parts)
    out = _fresh(np.array([[sum(p.item() for p in parts)]]))

    def backward(g):
        for p in parts:
            _accum(p, g)

    return _record(out, tuple(parts), backward)


def constant(values) -> Matrix:
    """A matrix that never receives gradients."""
    return Matrix(values)


def parameter(values, name: str) -> Matrix:
    """A named leaf that accumulates gradients."""
    m = Matrix(values, requires_grad=True, name=name)
    if not np.isfinite(m.a).all():
        raise GradientError(f"parameter '{name}' has non-finite entries")
    return m


# ---------------------------------------------------------------------------
# Seeded counter-based PRNG
# ---------------------------------------------------------------------------

class Rng:
    """Deterministic PRNG on numpy's 64-bit counter-based Philox stream.

    ``fork(label)`` derives an independent child stream from the same seed;
    the label is hashed so stream identity never depends on call order.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = self.seed | (self.stream << 64)
        self._g = np.random.Generator(np.random.Philox(key=key))

    def fork(self, label: str) -> "Rng":
        # chained through the parent stream so fork("a").fork("x") and
        # fork("b").fork("x") stay independent
        h = hashlib.sha256(self.stream.to_bytes(8, "little")
                           + label.encode("utf-8")).digest()
        return Rng(self.seed, int.from_bytes(h[:8], "little"))

    def normal(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        return self._g.normal(0.0, std, size=(rows, cols))

    def uniform(self, lo: float, hi: float, size=None):
        return self._g.uniform(lo, hi, size=size)

    def integers(self, lo: int, hi: int, size=None):
        return self._g.integers(lo, hi, size=size)

    def choice(self, seq):
        return seq[int(self._g.integers(0, len(seq)))]

    def shuffled(self, seq):
        order = np.arange(len(seq))
        self._g.shuffle(order)
        return [seq[i] for i in order]


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckGroup:
    name: str
    checked: int
    max_rel_err: float
    worst_index: tuple = (0, 0)
    passed: bool = True


@dataclass
class GradCheckReport:
    tol: float
    delta: float
    groups: list = field(default_factory=list)

    @property
    def passed(self):
        return all(g.passed for g in self.groups)

    @property
    def max_rel_err(self):
        return max((g.max_rel_err for g in self.groups), default=0.0)

    def failing_groups(self):
        return [g.name for g in self.groups if not g.passed]

    def summary(self):
        lines = []
        for g in self.groups:
            status = "ok" if g.passed else "FAIL"
            lines.append(
                f"{status}  {g.name}: max_rel_err={g.max_rel_err:.3e} "
                f"over {g.checked} entries (worst at {g.worst_index})")
        return "\n".join(lines)


def grad_check(f, params, delta=1e-3, tol=1e-4, samples_per_group=None, rng=None):
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must rebuild the forward pass from ``params`` on every call.
    ``samples_per_group`` limits how many entries per parameter are
    perturbed (None checks all). Relative error uses a unit floor:
    |fd - an| / max(|fd|, |an|, 1).
    """
    if rng is None:
        rng = Rng(0)
    with Tape() as t:
        loss = f()
        t.backward(loss)
    analytic = {}
    for name, p in params.items():
        analytic[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.a)
        p.zero_grad()

    report = GradCheckReport(tol=tol, delta=delta)
    for name, p in params.items():
        total = p.a.size
        if samples_per_group is None or samples_per_group >= total:
            flat_ids = np.arange(total)
        else:
            flat_ids = rng._g.choice(total, size=samples_per_group, replace=False)
        worst = 0.0
        worst_idx = (0, 0)
        buf = p.a.reshape(-1)
        for fid in flat_ids:
            orig = buf[fid]
            buf[fid] = orig + delta
            f_plus = f().item()
            buf[fid] = orig - delta
            f_minus = f().item()
            buf[fid] = orig
            fd = (f_plus - f_minus) / (2.0 * delta)
            an = analytic[name].reshape(-1)[fid]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1.0)
            if rel > worst:
                worst = rel
                worst_idx = (int(fid) // p.cols, int(fid) % p.cols)
        report.groups.append(GradCheckGroup(
            name=name, checked=len(flat_ids), max_rel_err=worst,
            worst_index=worst_idx, passed=worst <= tol))
    return report
