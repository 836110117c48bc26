"""Dense float64 arrays with taped reverse-mode gradients.

A deliberately small computation layer: a fixed vocabulary of primitives, a
linear tape that records them, a reverse pass that fills parameter gradients,
and a central-difference verifier. Everything runs on numpy in 64-bit floats;
determinism is bit-level for a fixed seed and thread count.

The primitive set is fixed; larger operations (attention, losses) are composed
from it so every backward rule stays small and individually testable. One
guarded elementwise ``log`` is included so log-likelihood losses are
expressible (its argument is floored at exp(-30), matching the loss clamp used
downstream).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ShapeError

LOG_FLOOR = math.exp(-30.0)

_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715

# Input validation on every primitive is a full array scan; the training hot
# loop disables it and checks the loss/grad-norm instead.
_VALIDATE = True


class validation_disabled:
    """Context manager that skips per-primitive finiteness scans."""

    def __enter__(self):
        global _VALIDATE
        self._saved = _VALIDATE
        _VALIDATE = False
        return self

    def __exit__(self, *exc):
        global _VALIDATE
        _VALIDATE = self._saved
        return False


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if _VALIDATE and not np.all(np.isfinite(arr)):
            raise NumericError(f"tensor {name or ''} contains non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Flat view of the stored values."""
        return self.data.reshape(-1)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __getstate__(self):
        return (self.data, self.grad, self.requires_grad, self.name)

    def __setstate__(self, state):
        self.data, self.grad, self.requires_grad, self.name = state


def constant(data, name=None):
    """Tensor that never receives a gradient."""
    return Tensor(data, requires_grad=False, name=name)


class Node:
    """One primitive application recorded on a tape.

    ``cache`` carries forward-pass intermediates to the backward rule (e.g.
    tanh values for gelu). It is dropped on serialization; backward rules
    recompute when it is missing.
    """

    __slots__ = ("op_kind", "inputs", "kwargs", "output", "cache")

    def __init__(self, op_kind, inputs, kwargs, output, cache=None):
        self.op_kind = op_kind
        self.inputs = inputs
        self.kwargs = kwargs
        self.output = output
        self.cache = cache

    def __getstate__(self):
        return (self.op_kind, self.inputs, self.kwargs, self.output)

    def __setstate__(self, state):
        self.op_kind, self.inputs, self.kwargs, self.output = state
        self.cache = None


class ComputationTape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so every node's inputs precede it
    and a single reverse sweep is a valid backward pass.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        self._saved = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._saved
        return False

    def __len__(self):
        return len(self.nodes)

    def replay(self):
        """Recompute every node from its recorded inputs.

        Returns the list of recomputed output arrays, in tape order. Recorded
        tensors are not mutated; identical inputs must reproduce identical
        outputs bit for bit.
        """
        fresh = {}
        outs = []
        for node in self.nodes:
            datas = [fresh.get(id(t), t.data) for t in node.inputs]
            out = _FORWARD[node.op_kind](datas, node.kwargs)
            if isinstance(out, tuple):
                out = out[0]
            fresh[id(node.output)] = out
            outs.append(out)
        return outs


Tape = ComputationTape

_ACTIVE_TAPE = None


def active_tape():
    return _ACTIVE_TAPE


def _record(op_kind, inputs, kwargs, out_data, cache=None):
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.nodes.append(Node(op_kind, tuple(inputs), kwargs, out, cache))
    return out


def _check_inputs(op_kind, inputs):
    if not _VALIDATE:
        return
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"{op_kind}: non-finite input of shape {t.data.shape}")


# ---------------------------------------------------------------------------
# forward rules: each takes ([ndarray, ...], kwargs) and returns an ndarray
# ---------------------------------------------------------------------------


def _fwd_matmul(datas, kwargs):
    a, b = datas
    if a.ndim != b.ndim or a.ndim < 2:
        raise ShapeError(f"matmul: ranks must match and be >= 2, got {a.shape} @ {b.shape}")
    if a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, got {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _fwd_add(datas, kwargs):
    a, b = datas
    try:
        return a + b
    except ValueError:
        raise ShapeError(f"add: shapes not broadcastable, got {a.shape} and {b.shape}")


def _fwd_multiply(datas, kwargs):
    a, b = datas
    try:
        return a * b
    except ValueError:
        raise ShapeError(f"multiply: shapes not broadcastable, got {a.shape} and {b.shape}")


def _fwd_scale(datas, kwargs):
    return datas[0] * kwargs["factor"]


def _fwd_softmax(datas, kwargs):
    x = datas[0]
    # rowwise max subtraction: overflow safety, mathematically the identity
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_layer_norm(datas, kwargs):
    x, gain, bias = datas
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must be shape ({d},), got {gain.shape} and {bias.shape}"
        )
    eps = kwargs.get("eps", 1e-6)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= inv  # xc is a private temporary
    if _is_unit_affine(gain, bias):
        return xhat, (mu, inv)
    return xhat * gain + bias, (mu, inv)


def _is_unit_affine(gain, bias):
    # gain/bias are one small row; the check is far cheaper than the two
    # full-array passes it saves
    return gain.ndim == 1 and bias.ndim == 1 and np.all(gain == 1.0) and not np.any(bias)


def _fwd_gelu(datas, kwargs):
    x = datas[0]
    u = x * x
    u *= _GELU_C1
    u += 1.0
    u *= _GELU_C0 * x
    th = np.tanh(u)
    out = th + 1.0
    out *= 0.5 * x
    return out, th


def _fwd_embedding_lookup(datas, kwargs):
    table = datas[0]
    ids = kwargs["ids"]
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise ShapeError(
            f"embedding_lookup: ids outside [0, {table.shape[0]}), "
            f"got range [{ids.min()}, {ids.max()}]"
        )
    return table[ids]


def _fwd_reshape(datas, kwargs):
    x = datas[0]
    shape = kwargs["shape"]
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


def _fwd_transpose(datas, kwargs):
    return datas[0].transpose(kwargs["axes"])


def _fwd_slice(datas, kwargs):
    return datas[0][kwargs["key"]]


def _fwd_concat(datas, kwargs):
    return np.concatenate(datas, axis=kwargs["axis"])


def _fwd_mean(datas, kwargs):
    return np.asarray(datas[0].mean())


def _fwd_sum_of_squares(datas, kwargs):
    x = datas[0]
    return np.asarray(np.dot(x.reshape(-1), x.reshape(-1)))


def _fwd_log(datas, kwargs):
    # guarded: argument floored at exp(-30) so underflowing probabilities
    # yield a finite value and a zero gradient in the clamped region
    return np.log(np.maximum(datas[0], LOG_FLOOR))


_FORWARD = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "multiply": _fwd_multiply,
    "scale": _fwd_scale,
    "softmax": _fwd_softmax,
    "layer_norm": _fwd_layer_norm,
    "gelu": _fwd_gelu,
    "embedding_lookup": _fwd_embedding_lookup,
    "reshape": _fwd_reshape,
    "transpose": _fwd_transpose,
    "slice": _fwd_slice,
    "concat": _fwd_concat,
    "mean": _fwd_mean,
    "sum_of_squares": _fwd_sum_of_squares,
    "log": _fwd_log,
}


# ---------------------------------------------------------------------------
# backward rules: each takes (node, grad_out) and returns one gradient (or
# None) per input
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap_last(a):
    return np.swapaxes(a, -1, -2)


def _bwd_matmul(node, g):
    a, b = node.inputs[0].data, node.inputs[1].data
    ga = np.matmul(g, _swap_last(b)) if node.inputs[0].requires_grad else None
    gb = np.matmul(_swap_last(a), g) if node.inputs[1].requires_grad else None
    return ga, gb


def _bwd_add(node, g):
    a, b = node.inputs
    ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
    gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
    return ga, gb


def _bwd_multiply(node, g):
    a, b = node.inputs
    ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
    return ga, gb


def _bwd_scale(node, g):
    return (g * node.kwargs["factor"],)


def _bwd_softmax(node, g):
    y = node.output.data
    dot = (g * y).sum(axis=-1, keepdims=True)
    return (y * (g - dot),)


def _bwd_layer_norm(node, g):
    x, gain, _ = (t.data for t in node.inputs)
    if node.cache is not None:
        mu, inv = node.cache
    else:
        eps = node.kwargs.get("eps", 1e-6)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gxhat = g if np.all(gain == 1.0) else g * gain
    m1 = gxhat.mean(axis=-1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    gx = inv * (gxhat - m1 - xhat * m2) if node.inputs[0].requires_grad else None
    lead = tuple(range(g.ndim - 1))
    ggain = (g * xhat).sum(axis=lead) if node.inputs[1].requires_grad else None
    gbias = g.sum(axis=lead) if node.inputs[2].requires_grad else None
    return gx, ggain, gbias


def _bwd_gelu(node, g):
    x = node.inputs[0].data
    if node.cache is not None:
        th = node.cache
    else:
        th = np.tanh(_GELU_C0 * (x + _GELU_C1 * x * x * x))
    # g * (0.5 (1 + th) + 0.5 x (1 - th^2) C0 (1 + 3 c1 x^2)), built in place
    du = x * x
    du *= 3.0 * _GELU_C1
    du += 1.0
    out = th * th
    np.subtract(1.0, out, out=out)
    out *= du
    out *= x
    out *= _GELU_C0
    out += 1.0
    out += th
    out *= 0.5
    out *= g
    return (out,)


def _bwd_embedding_lookup(node, g):
    table = node.inputs[0]
    if not table.requires_grad:
        return (None,)
    gt = np.zeros_like(table.data)
    np.add.at(gt, node.kwargs["ids"], g)
    return (gt,)


def _bwd_reshape(node, g):
    return (g.reshape(node.inputs[0].data.shape),)


def _bwd_transpose(node, g):
    inverse = np.argsort(node.kwargs["axes"])
    return (g.transpose(tuple(inverse)),)


def _bwd_slice(node, g):
    src = node.inputs[0].data
    gx = np.zeros(src.shape, dtype=src.dtype)  # calloc: untouched pages stay cheap
    gx[node.kwargs["key"]] = g
    return (gx,)


def _bwd_concat(node, g):
    axis = node.kwargs["axis"]
    sizes = [t.data.shape[axis] for t in node.inputs]
    splits = np.cumsum(sizes)[:-1]
    parts = np.split(g, splits, axis=axis)
    return tuple(p if t.requires_grad else None for p, t in zip(parts, node.inputs))


def _bwd_mean(node, g):
    x = node.inputs[0].data
    return (np.full_like(x, float(g) / x.size),)


def _bwd_sum_of_squares(node, g):
    return (2.0 * float(g) * node.inputs[0].data,)


def _bwd_log(node, g):
    x = node.inputs[0].data
    return (np.where(x > LOG_FLOOR, g / np.maximum(x, LOG_FLOOR), 0.0),)


_BACKWARD = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "multiply": _bwd_multiply,
    "scale": _bwd_scale,
    "softmax": _bwd_softmax,
    "layer_norm": _bwd_layer_norm,
    "gelu": _bwd_gelu,
    "embedding_lookup": _bwd_embedding_lookup,
    "reshape": _bwd_reshape,
    "transpose": _bwd_transpose,
    "slice": _bwd_slice,
    "concat": _bwd_concat,
    "mean": _bwd_mean,
    "sum_of_squares": _bwd_sum_of_squares,
    "log": _bwd_log,
}

OP_KINDS = tuple(_FORWARD)


def forward_primitive(op_kind, inputs, **kwargs):
    """Apply one primitive, recording it on the active tape (if any)."""
    if op_kind not in _FORWARD:
        raise ShapeError(f"unknown op_kind {op_kind!r}; valid: {sorted(_FORWARD)}")
    inputs = [x if isinstance(x, Tensor) else constant(x) for x in inputs]
    _check_inputs(op_kind, inputs)
    out = _FORWARD[op_kind]([t.data for t in inputs], kwargs)
    cache = None
    if isinstance(out, tuple):
        out, cache = out
    return _record(op_kind, inputs, kwargs, out, cache)


# thin functional spellings of the primitives

def matmul(a, b):
    return forward_primitive("matmul", [a, b])


def add(a, b):
    return forward_primitive("add", [a, b])


def multiply(a, b):
    return forward_primitive("multiply", [a, b])


def scale(a, factor):
    return forward_primitive("scale", [a], factor=float(factor))


def softmax(a):
    return forward_primitive("softmax", [a])


def layer_norm(x, gain, bias, eps=1e-6):
    return forward_primitive("layer_norm", [x, gain, bias], eps=eps)


def gelu(x):
    return forward_primitive("gelu", [x])


def embedding_lookup(table, ids):
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    return forward_primitive("embedding_lookup", [table], ids=ids)


def reshape(x, shape):
    return forward_primitive("reshape", [x], shape=tuple(int(s) for s in shape))


def transpose(x, axes):
    return forward_primitive("transpose", [x], axes=tuple(int(a) for a in axes))


def slice_(x, key):
    return forward_primitive("slice", [x], key=key)


def concat(xs, axis):
    return forward_primitive("concat", list(xs), axis=int(axis))


def mean(x):
    return forward_primitive("mean", [x])


def sum_of_squares(x):
    return forward_primitive("sum_of_squares", [x])


def log(x):
    return forward_primitive("log", [x])


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(tape, loss, params=None):
    """Fill `grad` on every reachable tensor that requires one.

    `loss` must be a scalar produced on `tape`. Intermediate gradients are
    dropped as soon as their node is processed; leaf tensors (parameters and
    other non-node tensors) keep theirs. If `params` is given, any parameter
    the loss does not reach gets an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise ShapeError("backward: loss tensor is detached from this tape")
    if _VALIDATE and not np.isfinite(loss.data.reshape(-1)[0]):
        raise NumericError("backward: loss is non-finite")

    loss.grad = np.ones_like(loss.data)
    owned = set()  # ids of tensors whose .grad buffer is private to them
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None or not node.output.requires_grad:
            node.output.grad = None
            continue
        grads = _BACKWARD[node.op_kind](node, g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if t.grad is None:
                # may alias grad_out (views, or the same object handed to two
                # inputs), so it must not be mutated until re-owned below
                t.grad = gt
            elif id(t) in owned:
                np.add(t.grad, gt, out=t.grad)
            else:
                t.grad = t.grad + gt
                owned.add(id(t))
        # intermediate results never need their gradient again
        node.output.grad = None
        owned.discard(id(node.output))

    if params is not None:
        for p in params.values() if hasattr(params, "values") else params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(params):
    for p in params.values() if hasattr(params, "values") else params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


class FdReport:
    """Per-parameter relative errors from a central-difference check."""

    def __init__(self, step, tolerance):
        self.step = step
        self.tolerance = tolerance
        self.per_param = {}  # name -> (max_rel_err, n_checked)

    @property
    def max_rel_err(self):
        return max((e for e, _ in self.per_param.values()), default=0.0)

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance

    def summary(self):
        lines = [
            f"finite-difference check: step={self.step:g} tolerance={self.tolerance:g}"
        ]
        for name, (err, n) in sorted(self.per_param.items()):
            lines.append(f"  {name:40s} max_rel_err={err:.3e}  ({n} coords)")
        lines.append(
            f"  => {'PASS' if self.passed else 'FAIL'} (max {self.max_rel_err:.3e})"
        )
        return "\n".join(lines)


def finite_difference_check(f, params, step=1e-4, tolerance=1e-4,
                            max_coords_per_param=None, rng=None):
    """Compare analytic gradients of ``f`` against central differences.

    ``f(params) -> scalar Tensor`` must be deterministic and must build its
    result through taped primitives. When ``max_coords_per_param`` is set,
    that many coordinates per parameter are spot-checked (seeded by ``rng``);
    otherwise every coordinate is checked.
    """
    with ComputationTape() as tape:
        loss = f(params)
    backward(tape, loss, params=params)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    base = loss.item()

    repeat = f(params).item()
    if repeat != base:
        raise NumericError(
            f"finite_difference_check: f is non-deterministic ({base!r} vs {repeat!r})"
        )

    report = FdReport(step, tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        checked = 0
        ag = analytic[name].reshape(-1)
        # tiny symmetric perturbations of an already-validated point: skip
        # the per-op finiteness scans inside the difference loop
        with validation_disabled():
            for i in coords:
                saved = flat[i]
                flat[i] = saved + step
                fp = f(params).item()
                flat[i] = saved - step
                fm = f(params).item()
                flat[i] = saved
                fd = (fp - fm) / (2.0 * step)
                denom = max(abs(ag[i]), abs(fd), 1e-6)
                worst = max(worst, abs(ag[i] - fd) / denom)
                checked += 1
        report.per_param[name] = (worst, checked)
    zero_grads(params)
    return report
