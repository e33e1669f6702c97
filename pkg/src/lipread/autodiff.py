"""Dense float64 tensors with a reverse-mode autodiff tape.

Small by design: 2-D matrices (sequences of feature rows) and scalars cover
everything the models need, so broadcasting is limited to scalars and
bias-style row vectors. All kernels are numpy; the tape is a per-output
closure recording parents and a backward rule, walked in reverse topological
order by ``backward``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording (evaluation paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A float64 array plus an optional gradient and tape node.

    ``_parents``/``_backward`` are set only on op outputs recorded while
    gradients are enabled; leaves have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; everything routes through the op functions so
    # the tape sees a uniform set of op kinds.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data, parents, backward_fn, op_name):
    """Build an op output, recording a tape node if any parent needs grad.

    ``backward_fn(grad_out) -> list of per-parent grads`` (None entries for
    parents that need no gradient). Custom losses (e.g. CTC) use this hook.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op_name
    return out


def _check_finite(arr, op_name):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op_name}: non-finite input")


# ---------------------------------------------------------------------------
# op kinds
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise add; also scalar + tensor and (d,) bias + (T, d)."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError("add: at least one Tensor operand required")
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        # allow (d,) against (T, d) for biases
        if not (len(a.shape) == 2 and b.shape == a.shape[1:]) and not (
            len(b.shape) == 2 and a.shape == b.shape[1:]
        ):
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")
    out_data = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return from_op(out_data, (a, b), backward, "add")


def _unbroadcast(g, shape):
    """Sum a gradient back down to ``shape`` after forward broadcasting."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # (T, d) grad against (d,) operand
    return g.reshape(-1, shape[-1]).sum(axis=0) if g.ndim > len(shape) else g.sum(axis=0)


def mul(a, b):
    """Elementwise product; one operand may be a python scalar."""
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        c = float(b)
        return from_op(a.data * c, (a,), lambda g: (g * c,), "mul")
    if isinstance(a, (int, float)):
        return mul(b, a)
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd, g * ad)

    return from_op(ad * bd, (a, b), backward, "mul")


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner axes {a.shape[1]} and {b.shape[0]} differ")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T, ad.T @ g)

    return from_op(ad @ bd, (a, b), backward, "matmul")


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expects 2-D, got {a.shape}")
    return from_op(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {t.shape} vs {tensors[0].shape}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def slice_axis(a, axis, start, stop):
    a = _as_tensor(a)
    if axis >= a.data.ndim:
        raise ShapeError(f"slice: axis {axis} out of range for {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape)
        full[idx] = g
        return (full,)

    return from_op(a.data[idx].copy(), (a,), backward, "slice")


def embed_gather(table, ids):
    """Rows of ``table`` at integer ``ids``; grads accumulate per occurrence."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embed_gather: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embed_gather: id out of range [0, {table.shape[0]}) in {ids[(ids < 0) | (ids >= table.shape[0])][:4]}"
        )
    n_rows = table.shape[0]

    def backward(g):
        gt = np.zeros((n_rows, table.shape[1]))
        np.add.at(gt, ids, g)
        return (gt,)

    return from_op(table.data[ids], (table,), backward, "embed_gather")


def softmax_lastdim(a):
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True) if x.size else x
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return from_op(s, (a,), backward, "softmax_lastdim")


def log_softmax_lastdim(a):
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True) if x.size else x
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return from_op(out, (a,), backward, "log_softmax_lastdim")


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    a = _as_tensor(a)
    gain = _as_tensor(gain)
    bias = _as_tensor(bias)
    d = a.shape[-1] if a.data.ndim else 0
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs feature dim {d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True) if x.size else np.zeros(x.shape[:-1] + (1,))
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True) if x.size else np.zeros_like(mu)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gy = g * gd
        # d xhat: project out mean and the xhat direction
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return (gx, ggain, gbias)

    return from_op(xhat * gd + bias.data, (a, gain, bias), backward, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximation GELU."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))

    def backward(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return from_op(0.5 * x * (1.0 + t), (a,), backward, "gelu")


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is True with a constant."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs data {a.shape}")
    keep = ~mask

    def backward(g):
        return (g * keep,)

    return from_op(np.where(mask, float(value), a.data), (a,), backward, "masked_fill")


def reduce_sum(a):
    a = _as_tensor(a)
    shape = a.shape
    return from_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "reduce_sum")


def reduce_mean(a):
    a = _as_tensor(a)
    if a.size == 0:
        raise ShapeError("reduce_mean: empty tensor")
    shape, n = a.shape, a.size
    return from_op(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "reduce_mean")


def cross_entropy(logits, targets, reduction="sum"):
    """Negative log-likelihood of integer ``targets`` under row softmaxes."""
    if reduction not in ("sum", "mean"):
        raise ContractError(f"cross_entropy: reduction must be 'sum' or 'mean', got {reduction!r}")
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs rows {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target id outside [0, {v})")
    _check_finite(logits.data, "cross_entropy")
    x = logits.data
    m = x.max(axis=-1, keepdims=True) if n else x
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -logp[np.arange(n), targets]
    scale = 1.0 / n if (reduction == "mean" and n) else 1.0
    soft = np.exp(logp)

    def backward(g):
        gl = soft.copy()
        gl[np.arange(n), targets] -= 1.0
        return (gl * (float(g) * scale),)

    return from_op(np.asarray(nll.sum() * scale), (logits,), backward, "cross_entropy")


OPS = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_axis,
    "embed_gather": embed_gather,
    "softmax_lastdim": softmax_lastdim,
    "log_softmax_lastdim": log_softmax_lastdim,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "masked_fill": masked_fill,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "cross_entropy": cross_entropy,
}


def apply_op(op_kind, inputs, attrs=None):
    """Dispatch one op by name. ``inputs`` is a sequence; attrs are kwargs."""
    if op_kind not in OPS:
        raise ContractError(f"unknown op kind {op_kind!r}")
    return OPS[op_kind](*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Reverse-mode sweep from a scalar loss; returns {leaf: grad array}.

    Gradients accumulate additively into each requires_grad leaf's ``.grad``
    (no implicit zeroing between calls). A given loss node may be swept once.
    """
    if not isinstance(loss, Tensor) or loss.shape != ():
        raise ContractError(f"backward: loss must be a scalar Tensor, got shape {getattr(loss, 'shape', None)}")
    if loss._backward is None:
        raise ContractError("backward: loss is not connected to the tape")
    if loss._done:
        raise ContractError("backward: this loss was already swept; rebuild the graph")
    loss._done = True

    # iterative post-order topo sort (graphs exceed the recursion limit)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None or p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones(())}
    leaf_map = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # requires_grad leaf
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaf_map[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent._backward is not None or parent.requires_grad):
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return leaf_map


def zero_grads(params):
    """Explicit gradient reset (params: iterable or name->Tensor mapping)."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus a per-parameter step counter."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = {}


def adam_step(params, state, lr, beta1=0.9, beta2=0.98, eps=1e-8, active=None, lr_scales=None):
    """One bias-corrected Adam update over a name->Tensor mapping.

    Parameters with no grad are treated as zero-gradient (their moments
    decay). ``active`` restricts the update to a subset of names, leaving
    the rest bit-identical, moments included (freezing). ``lr_scales`` maps
    names to per-parameter learning-rate multipliers (default 1).
    """
    if lr < 0:
        raise ContractError(f"adam_step: negative learning rate {lr}")
    for name, p in params.items():
        if active is not None and name not in active:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        scale = lr_scales.get(name, 1.0) if lr_scales else 1.0
        p.data -= (lr * scale) * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def numeric_gradient(f, wrt, eps=1e-5, entries=None, rng=None):
    """Central finite differences of scalar ``f()`` w.r.t. each Tensor in ``wrt``.

    ``f`` must rebuild its graph on every call (it is evaluated 2x per probed
    entry). ``entries`` caps the probed entries per tensor (sampled with
    ``rng``), returning grads only at the probed flat indices as
    (indices, values) pairs; with entries=None the full gradient is returned.
    """
    results = []
    for t in wrt:
        flat = t.data.reshape(-1)
        if entries is None or flat.size <= entries:
            idxs = np.arange(flat.size)
        else:
            idxs = np.sort((rng or np.random.default_rng(0)).choice(flat.size, size=entries, replace=False))
        vals = np.zeros(len(idxs))
        for j, i in enumerate(idxs):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            vals[j] = (fp - fm) / (2 * eps)
        if entries is None or flat.size <= entries:
            results.append(vals.reshape(t.shape))
        else:
            results.append((idxs, vals))
    return results


def max_rel_error(analytic, numeric, floor=1e-3):
    """max |a-n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
