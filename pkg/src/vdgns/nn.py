"""Minimal dense reverse-mode autodiff on 64-bit numpy matrices.

Everything learnable in this package (MLPs, the LSTM, the graph network)
is built from the handful of primitives here.  Design in one paragraph:
a ``Tensor`` wraps a 2-D float64 array; operations run eagerly on numpy
and, when a ``Tape`` is active and an input requires gradients, append a
backward rule to that tape (define-by-run).  ``Tape.backward`` walks the
records in reverse, accumulating ``grad`` arrays on the tensors.  There
is no graph surgery, no broadcasting zoo, no views: every op returns a
fresh matrix, which keeps the backward rules trivially correct.

Tapes are kept in a thread-local stack, so independent tapes may be used
from different threads; a single tape must only ever be used from one.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse

__all__ = [
    "Tensor",
    "Tape",
    "ParameterSet",
    "AdamState",
    "matmul",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "scale",
    "concat_cols",
    "slice_cols",
    "gather_rows",
    "segment_sum",
    "broadcast_rows",
    "mse_loss",
    "init_affine",
    "init_mlp",
    "init_lstm",
    "mlp_forward",
    "lstm_step",
    "adam_step",
    "gradient_check",
    "save_parameters",
    "load_parameters",
]


class Tensor:
    """A rows x cols matrix of float64 with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data[0, 0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _TapeStack(threading.local):
    def __init__(self):
        self.stack = []


_tapes = _TapeStack()


class Tape:
    """Linear record of operations; backward order is reverse recording order."""

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tapes.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes.stack.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and push gradients back through the records."""
        if loss.data.size != 1:
            raise ValueError("backward() expects a scalar (1x1) loss tensor")
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, rule in reversed(self._records):
            if out.grad is not None:
                rule(out.grad)


def _active_tape() -> Tape | None:
    stack = _tapes.stack
    return stack[-1] if stack else None


def _make_out(data: np.ndarray, inputs: Iterable[Tensor], backward_builder) -> Tensor:
    """Create the output tensor and record its backward rule if needed."""
    tracked = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    tape = _active_tape()
    if tracked and tape is not None:
        tape.record(out, backward_builder(out))
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def build(out):
        a_data, b_data = a.data, b.data

        def rule(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b_data.T)
            if b.requires_grad:
                b.accumulate_grad(a_data.T @ g)

        return rule

    return _make_out(data, (a, b), build)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-row bias broadcast over a's rows."""
    if a.shape == b.shape:
        data = a.data + b.data
        bias = False
    elif b.rows == 1 and b.cols == a.cols:
        data = a.data + b.data
        bias = True
    else:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")

    def build(out):
        def rule(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=0, keepdims=True) if bias else g)

        return rule

    return _make_out(data, (a, b), build)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    data = a.data * b.data

    def build(out):
        a_data, b_data = a.data, b.data

        def rule(g):
            if a.requires_grad:
                a.accumulate_grad(g * b_data)
            if b.requires_grad:
                b.accumulate_grad(g * a_data)

        return rule

    return _make_out(data, (a, b), build)


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * c

    def build(out):
        def rule(g):
            if a.requires_grad:
                a.accumulate_grad(g * c)

        return rule

    return _make_out(data, (a,), build)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def build(out):
        t = out.data

        def rule(g):
            if x.requires_grad:
                x.accumulate_grad(g * (1.0 - t * t))

        return rule

    return _make_out(data, (x,), build)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows for large |x|.
    v = x.data
    e = np.exp(-np.abs(v))
    data = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def build(out):
        s = out.data

        def rule(g):
            if x.requires_grad:
                x.accumulate_grad(g * s * (1.0 - s))

        return rule

    return _make_out(data, (x,), build)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ValueError("concat_cols: row count mismatch")
    data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def build(out):
        def rule(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p.accumulate_grad(g[:, lo:hi])

        return rule

    return _make_out(data, tuple(parts), build)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= x.cols):
        raise ValueError(f"slice_cols [{lo}:{hi}] out of range for {x.shape}")
    data = x.data[:, lo:hi].copy()

    def build(out):
        def rule(g):
            if x.requires_grad:
                full = np.zeros_like(x.data)
                full[:, lo:hi] = g
                x.accumulate_grad(full)

        return rule

    return _make_out(data, (x,), build)


def gather_rows(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    data = x.data[idx]

    def build(out):
        # np.add.at is fine for a handful of rows but far too slow for the
        # tens of thousands of edge gathers per graph; those scatter back
        # through a sparse one-hot matmul instead.
        big = idx.size * x.cols > 65536
        scatter = None

        def rule(g):
            nonlocal scatter
            if not x.requires_grad:
                return
            if big:
                if scatter is None:
                    scatter = scipy.sparse.csr_matrix(
                        (np.ones(idx.size), (idx, np.arange(idx.size))),
                        shape=(x.rows, idx.size),
                    )
                x.accumulate_grad(np.asarray(scatter @ g))
            else:
                full = np.zeros_like(x.data)
                np.add.at(full, idx, g)
                x.accumulate_grad(full)

        return rule

    return _make_out(data, (x,), build)


def segment_sum(x: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows of x into ``num_segments`` buckets given per-row segment ids."""
    seg = np.asarray(segments, dtype=np.intp)
    if seg.shape != (x.rows,):
        raise ValueError("segment_sum: one segment id per row required")
    mat = scipy.sparse.csr_matrix(
        (np.ones(len(seg)), (seg, np.arange(len(seg)))),
        shape=(num_segments, x.rows),
    )
    data = np.asarray(mat @ x.data)

    def build(out):
        mat_t = mat.T.tocsr()

        def rule(g):
            if x.requires_grad:
                x.accumulate_grad(np.asarray(mat_t @ g))

        return rule

    return _make_out(data, (x,), build)


def broadcast_rows(x: Tensor, num_rows: int) -> Tensor:
    """Repeat a 1-row tensor to ``num_rows`` rows; backward sums over rows."""
    if x.rows != 1:
        raise ValueError("broadcast_rows expects a 1-row tensor")
    data = np.repeat(x.data, num_rows, axis=0)

    def build(out):
        def rule(g):
            if x.requires_grad:
                x.accumulate_grad(g.sum(axis=0, keepdims=True))

        return rule

    return _make_out(data, (x,), build)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    data = np.array([[np.mean(diff * diff)]])

    def build(out):
        def rule(g):
            # g is 1x1
            gd = (2.0 / n) * g[0, 0] * diff
            if pred.requires_grad:
                pred.accumulate_grad(gd)
            if target.requires_grad:
                target.accumulate_grad(-gd)

        return rule

    return _make_out(data, (pred, target), build)


# ---------------------------------------------------------------------------
# parameters


class ParameterSet:
    """Named map of trainable tensors with lexicographic iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def num_coords(self) -> int:
        return sum(t.data.size for _, t in self.items())

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, t in self.items():
            out.add(name, t.data.copy())
        return out


def init_affine(params: ParameterSet, prefix: str, fan_in: int, fan_out: int, rng) -> None:
    bound = np.sqrt(1.0 / fan_in)
    params.add(f"{prefix}.W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    params.add(f"{prefix}.b", rng.uniform(-bound, bound, size=(1, fan_out)))


def init_mlp(params: ParameterSet, prefix: str, layer_sizes: Sequence[int], rng) -> None:
    for i, (fi, fo) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        init_affine(params, f"{prefix}.layer{i}", fi, fo, rng)


def mlp_forward(params: ParameterSet, prefix: str, x: Tensor,
                layer_sizes: Sequence[int]) -> Tensor:
    """Alternating affine layers with tanh; the output layer stays linear.

    Hidden activations are bounded by tanh but accelerations and physical
    encodings are not, hence no activation on the last layer.
    """
    if x.cols != layer_sizes[0]:
        raise ValueError(
            f"mlp {prefix!r} expects input width {layer_sizes[0]}, got {x.cols}")
    h = x
    last = len(layer_sizes) - 2
    for i in range(len(layer_sizes) - 1):
        h = add(matmul(h, params[f"{prefix}.layer{i}.W"]),
                params[f"{prefix}.layer{i}.b"])
        if i != last:
            h = tanh(h)
    return h


def init_lstm(params: ParameterSet, prefix: str, input_size: int, hidden_size: int,
              rng) -> None:
    """One packed weight block per source; gate order along columns is i,f,g,o.

    The forget-gate bias starts at 1.0 so early training does not erase
    the cell state.
    """
    bound = np.sqrt(1.0 / input_size)
    params.add(f"{prefix}.Wx", rng.uniform(-bound, bound, (input_size, 4 * hidden_size)))
    bound_h = np.sqrt(1.0 / hidden_size)
    params.add(f"{prefix}.Wh", rng.uniform(-bound_h, bound_h, (hidden_size, 4 * hidden_size)))
    b = rng.uniform(-bound_h, bound_h, (1, 4 * hidden_size))
    b[0, hidden_size:2 * hidden_size] = 1.0
    params.add(f"{prefix}.b", b)


def lstm_step(params: ParameterSet, prefix: str, x: Tensor, h_prev: Tensor,
              c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """Standard LSTM cell; rows of x/h/c form an independent batch."""
    hidden = h_prev.cols
    if c_prev.cols != hidden:
        raise ValueError(f"lstm_step: h has {hidden} cols but c has {c_prev.cols}")
    if x.rows != h_prev.rows or x.rows != c_prev.rows:
        raise ValueError("lstm_step: batch row mismatch between x, h, c")
    gates = add(add(matmul(x, params[f"{prefix}.Wx"]),
                    matmul(h_prev, params[f"{prefix}.Wh"])),
                params[f"{prefix}.b"])
    i = sigmoid(slice_cols(gates, 0, hidden))
    f = sigmoid(slice_cols(gates, hidden, 2 * hidden))
    g = tanh(slice_cols(gates, 2 * hidden, 3 * hidden))
    o = sigmoid(slice_cols(gates, 3 * hidden, 4 * hidden))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: ParameterSet):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: ParameterSet, state: AdamState, lr: float = 1e-4,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; zeroes gradients afterwards."""
    b1, b2 = betas
    for name, t in params.items():
        if t.grad is None:
            raise RuntimeError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
        t.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference oracle


def gradient_check(loss_fn: Callable[[], Tensor], params: ParameterSet,
                   h: float = 1e-5, max_coords: int = 10_000,
                   rng=None) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn`` must be pure and deterministic; it is evaluated once under
    a tape for the analytic gradients and twice per probed coordinate for
    the finite differences.  Above ``max_coords`` total coordinates a
    seeded random subsample is probed instead (spread across every
    parameter tensor).  The relative error uses a 1e-6 denominator floor
    so that coordinates with vanishing gradients compare absolutely.
    """
    params.zero_grads()
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.item()):
        raise FloatingPointError("gradient_check: loss is not finite")
    tape.backward(loss)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in params.items()}
    params.zero_grads()

    coords = []
    for name, t in params.items():
        for flat in range(t.data.size):
            coords.append((name, flat))
    if len(coords) > max_coords:
        if rng is None:
            rng = np.random.default_rng(0)
        # Keep at least one probe per tensor so no parameter goes unchecked.
        chosen = {coords[i] for i in rng.choice(len(coords), size=max_coords, replace=False)}
        for name, t in params.items():
            chosen.add((name, int(rng.integers(t.data.size))))
        coords = sorted(chosen)

    worst = 0.0
    for name, flat in coords:
        t = params[name]
        view = t.data.reshape(-1)
        orig = view[flat]
        view[flat] = orig + h
        loss_hi = loss_fn().item()
        view[flat] = orig - h
        loss_lo = loss_fn().item()
        view[flat] = orig
        if not (np.isfinite(loss_hi) and np.isfinite(loss_lo)):
            raise FloatingPointError(f"gradient_check: non-finite loss probing {name}")
        fd = (loss_hi - loss_lo) / (2.0 * h)
        an = analytic[name].reshape(-1)[flat]
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"VDGN"
_VERSION = 1


def save_parameters(params: ParameterSet, path) -> None:
    """Little-endian binary dump; bit-exact round trip."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", t.rows, t.cols))
            fh.write(t.data.astype("<f8", copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated parameter file while reading {what}")
    return buf


def load_parameters(path) -> ParameterSet:
    params = ParameterSet()
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise ValueError("bad magic: not a parameter file")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != _VERSION:
            raise ValueError(f"unsupported parameter file version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            rows, cols = struct.unpack("<II", _read_exact(fh, 8, "shape"))
            raw = _read_exact(fh, rows * cols * 8, f"values of {name}")
            data = np.frombuffer(raw, dtype="<f8").reshape(rows, cols)
            params.add(name, data.copy())
    return params
