"""Tape-based reverse-mode differentiation over dense 2-D float64 matrices.

Every value flowing through a :class:`Tape` is a C-ordered ``float64`` array
of shape ``(rows, cols)``.  Each primitive records which slots it read and
which slot it wrote; :func:`backward` replays the records in exact reverse
execution order and accumulates gradients into per-slot buffers that start at
zero.  Backward rules live in a flat registry keyed by op name rather than in
per-op closures, so the whole engine stays easy to inspect and to port.

A tape is single-threaded.  Distinct tapes reading the same (immutable)
parameter arrays may run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "Tape",
    "Var",
    "backward",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "mul_const",
    "slice_rows",
    "softmax_rows",
    "softplus",
    "softplus_inv",
    "tanh",
    "sum_all",
    "mean_all",
    "rope2d",
    "multihead_attention",
    "grad_check",
    "AdamState",
    "adam_step",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


def as_matrix(value) -> np.ndarray:
    """Coerce ``value`` to a C-contiguous 2-D float64 array.

    Scalars become ``(1, 1)`` and 1-D arrays become row vectors; anything of
    higher rank is rejected.
    """
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a 2-D value, got shape {arr.shape}")
    return arr


@dataclass
class _Op:
    name: str
    inputs: tuple[int, ...]
    output: int
    aux: dict


@dataclass
class Var:
    """A handle to one value slot on a tape."""

    tape: "Tape"
    idx: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def grad(self) -> np.ndarray | None:
        return self.tape.grads[self.idx]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented


class Tape:
    """Ordered record of primitive operations and their value slots."""

    def __init__(self, check_finite: bool = False):
        self.values: list[np.ndarray] = []
        self.grads: list[np.ndarray | None] = []
        self.ops: list[_Op] = []
        self.check_finite = check_finite

    def slot(self, value) -> Var:
        """Append a leaf slot (parameter or constant) holding ``value``."""
        arr = as_matrix(value)
        if self.check_finite and not np.isfinite(arr).all():
            raise ContractError("non-finite value entering the tape")
        self.values.append(arr)
        self.grads.append(None)
        return Var(self, len(self.values) - 1)

    def record(self, name: str, inputs: tuple[Var, ...], out_value: np.ndarray, **aux) -> Var:
        out = self.slot(out_value)
        self.ops.append(_Op(name, tuple(v.idx for v in inputs), out.idx, aux))
        return out


def _coerce(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ContractError("operands live on different tapes")
        return x
    return tape.slot(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] > 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] > 1:
        out = out.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Var, b) -> Var:
    """Matrix product ``a @ b``, recorded on the tape of ``a``."""
    tape = a.tape
    b = _coerce(tape, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree: {a.value.shape} @ {b.value.shape}"
        )
    return tape.record("matmul", (a, b), a.value @ b.value)


def transpose(a: Var) -> Var:
    return a.tape.record("transpose", (a,), np.ascontiguousarray(a.value.T))


def add(a: Var, b) -> Var:
    tape = a.tape
    b = _coerce(tape, b)
    return tape.record("add", (a, b), a.value + b.value)


def sub(a: Var, b) -> Var:
    tape = a.tape
    b = _coerce(tape, b)
    return tape.record("sub", (a, b), a.value - b.value)


def mul(a: Var, b) -> Var:
    """Elementwise (broadcasting) product of two tape values."""
    tape = a.tape
    b = _coerce(tape, b)
    return tape.record("mul", (a, b), a.value * b.value)


def scale(a: Var, c: float) -> Var:
    return a.tape.record("scale", (a,), a.value * c, c=c)


def add_const(a: Var, c) -> Var:
    """Add a non-differentiated constant to ``a``."""
    return a.tape.record("add_const", (a,), a.value + as_matrix(c))


def mul_const(a: Var, c) -> Var:
    """Multiply ``a`` elementwise by a non-differentiated constant."""
    c = as_matrix(c)
    return a.tape.record("mul_const", (a,), a.value * c, c=c)


def slice_rows(a: Var, start: int, stop: int) -> Var:
    n = a.value.shape[0]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.value.shape}")
    return a.tape.record("slice_rows", (a,), a.value[start:stop].copy(), start=start, stop=stop)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Var) -> Var:
    """Rowwise softmax with per-row max subtraction for stability."""
    if not np.isfinite(x.value).all():
        raise ContractError("softmax_rows requires finite inputs")
    return x.tape.record("softmax_rows", (x,), _softmax(x.value))


def softplus(x: Var) -> Var:
    return x.tape.record("softplus", (x,), np.logaddexp(0.0, x.value))


def softplus_inv(y: float) -> float:
    """Scalar inverse of softplus, for parameter initialisation."""
    if y <= 0:
        raise ContractError(f"softplus_inv needs y > 0, got {y}")
    return float(np.log(np.expm1(y)))


def tanh(x: Var) -> Var:
    return x.tape.record("tanh", (x,), np.tanh(x.value))


def sum_all(x: Var) -> Var:
    return x.tape.record("sum_all", (x,), np.array([[x.value.sum()]]))


def mean_all(x: Var) -> Var:
    return x.tape.record("mean_all", (x,), np.array([[x.value.mean()]]))


def _rope_tables(coords: np.ndarray, width: int, base: float, block: int):
    """Cos/sin tables for planar rotary rotation of ``(..., width)`` vectors.

    ``block`` is the head width; within each block the first half of the
    rotation pairs turns by ``theta_f * u`` and the second half by
    ``theta_f * v``, with the frequency ladder ``theta_f = base**(-2f/(block/2))``
    applied identically to both coordinates.  ``coords`` may carry leading
    batch axes before its final ``(n, 2)`` shape.
    """
    if block % 4 != 0:
        raise ContractError(f"rope2d needs a head width divisible by 4, got {block}")
    if width % block != 0:
        raise ShapeError(f"rope2d: width {width} is not a multiple of block {block}")
    per_coord = block // 4
    freqs = base ** (-2.0 * np.arange(per_coord) / (block / 2.0))
    ang_u = coords[..., 0:1] * freqs
    ang_v = coords[..., 1:2] * freqs
    ang = np.tile(np.concatenate([ang_u, ang_v], axis=-1), width // block)
    return np.cos(ang), np.sin(ang)


def _rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def rope2d(x: Var, coords, base: float, block: int | None = None) -> Var:
    """Rotate consecutive column pairs of ``x`` by angles set by planar coords.

    ``coords`` is an ``(n, 2)`` constant array of per-row (u, v) positions.
    The rotation preserves row norms, and dot products between two rotated
    vectors depend only on coordinate differences.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n, width = x.value.shape
    if coords.shape[0] != n:
        raise ShapeError(f"rope2d: {n} rows but {coords.shape[0]} coordinate pairs")
    if block is None:
        block = width
    cos, sin = _rope_tables(coords, width, base, block)
    return x.tape.record("rope2d", (x,), _rope_apply(x.value, cos, sin), cos=cos, sin=sin)


def multihead_attention(q: Var, k: Var, v: Var, n_heads: int,
                        lam: Var | None = None, sq_dist=None):
    """Scaled dot-product attention over column-blocked heads.

    ``q`` is ``(n_q, d)``, ``k`` and ``v`` are ``(L, d)`` with ``d`` split into
    ``n_heads`` contiguous column blocks.  When ``lam`` (one nonnegative value
    per head, or a single shared one) and ``sq_dist`` (an ``(n_q, L)`` array of
    squared distances) are given, ``lam[h] * sq_dist`` is subtracted from head
    ``h``'s logits before the softmax.

    Returns ``(out, alpha)`` where ``out`` is the ``(n_q, d)`` concatenation of
    head outputs and ``alpha`` is a read-only ``(n_heads, n_q, L)`` array of
    attention weights.
    """
    tape = q.tape
    nq, d = q.value.shape
    L, dk = k.value.shape
    if dk != d or v.value.shape != (L, d):
        raise ShapeError(
            f"multihead_attention: q {q.value.shape}, k {k.value.shape}, v {v.value.shape}"
        )
    if d % n_heads != 0:
        raise ShapeError(f"multihead_attention: width {d} not divisible by {n_heads} heads")
    hd = d // n_heads

    if (lam is None) != (sq_dist is None):
        raise ContractError("lam and sq_dist must be supplied together")
    sq = None
    if sq_dist is not None:
        sq = np.asarray(sq_dist, dtype=np.float64).reshape(nq, L)
        if (sq < 0).any():
            raise ContractError("squared distances must be nonnegative")
        if lam.value.shape not in ((n_heads, 1), (1, 1)):
            raise ShapeError(
                f"lam must be ({n_heads}, 1) or (1, 1), got {lam.value.shape}"
            )
        if (lam.value < 0).any():
            raise ContractError("attention bias factors must be nonnegative")

    qh = q.value.reshape(nq, n_heads, hd).transpose(1, 0, 2)
    kh = k.value.reshape(L, n_heads, hd).transpose(1, 0, 2)
    vh = v.value.reshape(L, n_heads, hd).transpose(1, 0, 2)
    logits = (qh @ kh.transpose(0, 2, 1)) / math.sqrt(hd)
    if sq is not None:
        logits = logits - lam.value.reshape(-1, 1, 1) * sq
    alpha = _softmax(logits)
    out = (alpha @ vh).transpose(1, 0, 2).reshape(nq, d)

    inputs = (q, k, v) if lam is None else (q, k, v, lam)
    out_var = tape.record(
        "multihead_attention", inputs, out,
        n_heads=n_heads, alpha=alpha, sq=sq,
    )
    alpha_view = alpha.copy()
    alpha_view.setflags(write=False)
    return out_var, alpha_view


# ---------------------------------------------------------------------------
# backward rules
# ---------------------------------------------------------------------------


def _bwd_matmul(tape, op):
    g = tape.grads[op.output]
    a, b = (tape.values[i] for i in op.inputs)
    tape.grads[op.inputs[0]] += g @ b.T
    tape.grads[op.inputs[1]] += a.T @ g


def _bwd_transpose(tape, op):
    tape.grads[op.inputs[0]] += tape.grads[op.output].T


def _bwd_add(tape, op):
    g = tape.grads[op.output]
    for idx in op.inputs:
        tape.grads[idx] += _unbroadcast(g, tape.values[idx].shape)


def _bwd_sub(tape, op):
    g = tape.grads[op.output]
    a_idx, b_idx = op.inputs
    tape.grads[a_idx] += _unbroadcast(g, tape.values[a_idx].shape)
    tape.grads[b_idx] -= _unbroadcast(g, tape.values[b_idx].shape)


def _bwd_mul(tape, op):
    g = tape.grads[op.output]
    a_idx, b_idx = op.inputs
    a, b = tape.values[a_idx], tape.values[b_idx]
    tape.grads[a_idx] += _unbroadcast(g * b, a.shape)
    tape.grads[b_idx] += _unbroadcast(g * a, b.shape)


def _bwd_scale(tape, op):
    tape.grads[op.inputs[0]] += tape.grads[op.output] * op.aux["c"]


def _bwd_add_const(tape, op):
    tape.grads[op.inputs[0]] += tape.grads[op.output]


def _bwd_mul_const(tape, op):
    g = tape.grads[op.output] * op.aux["c"]
    tape.grads[op.inputs[0]] += _unbroadcast(g, tape.values[op.inputs[0]].shape)


def _bwd_slice_rows(tape, op):
    tape.grads[op.inputs[0]][op.aux["start"]:op.aux["stop"]] += tape.grads[op.output]


def _bwd_softmax_rows(tape, op):
    g = tape.grads[op.output]
    s = tape.values[op.output]
    tape.grads[op.inputs[0]] += s * (g - (g * s).sum(axis=1, keepdims=True))


def _bwd_softplus(tape, op):
    x = tape.values[op.inputs[0]]
    sig = np.exp(-np.logaddexp(0.0, -x))
    tape.grads[op.inputs[0]] += tape.grads[op.output] * sig


def _bwd_tanh(tape, op):
    y = tape.values[op.output]
    tape.grads[op.inputs[0]] += tape.grads[op.output] * (1.0 - y * y)


def _bwd_sum_all(tape, op):
    tape.grads[op.inputs[0]] += tape.grads[op.output][0, 0]


def _bwd_mean_all(tape, op):
    x = tape.values[op.inputs[0]]
    tape.grads[op.inputs[0]] += tape.grads[op.output][0, 0] / x.size


def _bwd_rope2d(tape, op):
    g = tape.grads[op.output]
    cos, sin = op.aux["cos"], op.aux["sin"]
    ge = g[:, 0::2]
    go = g[:, 1::2]
    gx = np.empty_like(g)
    gx[:, 0::2] = ge * cos + go * sin
    gx[:, 1::2] = -ge * sin + go * cos
    tape.grads[op.inputs[0]] += gx


def _bwd_multihead_attention(tape, op):
    g = tape.grads[op.output]
    n_heads = op.aux["n_heads"]
    alpha = op.aux["alpha"]
    sq = op.aux["sq"]
    q = tape.values[op.inputs[0]]
    k = tape.values[op.inputs[1]]
    v = tape.values[op.inputs[2]]
    nq, d = q.shape
    L = k.shape[0]
    hd = d // n_heads
    inv = 1.0 / math.sqrt(hd)

    gh = g.reshape(nq, n_heads, hd).transpose(1, 0, 2)
    kh = k.reshape(L, n_heads, hd).transpose(1, 0, 2)
    qh = q.reshape(nq, n_heads, hd).transpose(1, 0, 2)
    vh = v.reshape(L, n_heads, hd).transpose(1, 0, 2)

    dalpha = gh @ vh.transpose(0, 2, 1)
    dv = (alpha.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(L, d)
    tape.grads[op.inputs[2]] += dv
    dlogits = alpha * (dalpha - (dalpha * alpha).sum(axis=2, keepdims=True))
    dq = ((dlogits @ kh) * inv).transpose(1, 0, 2).reshape(nq, d)
    dk = ((dlogits.transpose(0, 2, 1) @ qh) * inv).transpose(1, 0, 2).reshape(L, d)
    tape.grads[op.inputs[0]] += dq
    tape.grads[op.inputs[1]] += dk
    if sq is not None:
        dlam = -(dlogits * sq).sum(axis=(1, 2)).reshape(-1, 1)
        lam_idx = op.inputs[3]
        if tape.values[lam_idx].shape == (1, 1):
            dlam = dlam.sum().reshape(1, 1)
        tape.grads[lam_idx] += dlam


_BACKWARD = {
    "matmul": _bwd_matmul,
    "transpose": _bwd_transpose,
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "scale": _bwd_scale,
    "add_const": _bwd_add_const,
    "mul_const": _bwd_mul_const,
    "slice_rows": _bwd_slice_rows,
    "softmax_rows": _bwd_softmax_rows,
    "softplus": _bwd_softplus,
    "tanh": _bwd_tanh,
    "sum_all": _bwd_sum_all,
    "mean_all": _bwd_mean_all,
    "rope2d": _bwd_rope2d,
    "multihead_attention": _bwd_multihead_attention,
}


def backward(tape: Tape, loss: Var) -> None:
    """Accumulate d(loss)/d(slot) for every slot on the tape.

    The loss slot must hold a scalar.  Gradient buffers are zeroed first, then
    the op records are replayed in reverse execution order.
    """
    if loss.tape is not tape:
        raise ContractError("loss does not belong to this tape")
    if loss.value.shape != (1, 1):
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    tape.grads = [np.zeros_like(val) for val in tape.values]
    tape.grads[loss.idx][0, 0] = 1.0
    for op in reversed(tape.ops):
        _BACKWARD[op.name](tape, op)


# ---------------------------------------------------------------------------
# gradient checking and optimisation
# ---------------------------------------------------------------------------


def grad_check(f, x, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a :class:`Var` to a scalar :class:`Var` on the same tape.  The
    error per entry is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    x0 = as_matrix(x).copy()

    tape = Tape()
    xv = tape.slot(x0.copy())
    backward(tape, f(xv))
    analytic = tape.grads[xv.idx].copy()

    numeric = np.zeros_like(x0)
    for i in range(x0.shape[0]):
        for j in range(x0.shape[1]):
            xp = x0.copy()
            xp[i, j] += eps
            fp = float(f(Tape().slot(xp)).value[0, 0])
            xm = x0.copy()
            xm[i, j] -= eps
            fm = float(f(Tape().slot(xm)).value[0, 0])
            numeric[i, j] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


@dataclass
class AdamState:
    """First/second moment buffers and the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(
                f"adam_step: gradient shape {g.shape} does not match parameter "
                f"'{name}' of shape {p.shape}"
            )
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ContractError(f"adam_step: stale moment shapes for '{name}'")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state
