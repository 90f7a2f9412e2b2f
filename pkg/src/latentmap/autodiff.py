"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Every network in the package is built from the primitives here. Design
constraints, in rough order of importance:

* 64-bit everywhere, so central-difference gradient checks are meaningful.
* A linear tape: ops append in execution order, which is automatically a
  topological order, and the backward pass walks it once in reverse. With a
  fixed op sequence the accumulation order is fixed, so gradients are
  bitwise reproducible run to run.
* No broadcasting except adding a row vector (bias) to a matrix.

Ops only record onto a tape while one is active (``with Tape(): ...``);
outside a tape they just compute values, which is what inference and
finite-difference probing use.
"""

import numpy as np

from .errors import NumericError, ShapeError

_TAPE_STACK = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, values, requires_grad=False):
        # asarray keeps 0-d scalars 0-d and adopts float64 arrays without copying
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # Thin operator sugar; the named functions below do the real work.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(values, requires_grad=False):
    return Tensor(values, requires_grad=requires_grad)


def constant(values):
    return Tensor(values, requires_grad=False)


class Tape:
    """Ordered record of executed ops.

    Each entry is ``(out, [(input, vjp), ...])`` where ``vjp`` maps the
    output adjoint to that input's adjoint contribution. Entries are
    appended in execution order, so inputs always precede their consumers.
    """

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out, rules):
        self.entries.append((out, rules))


def _make_out(values, inputs, vjps):
    """Build the op output, recording on the active tape when needed."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        rules = [(t, v) for t, v in zip(inputs, vjps) if t.requires_grad]
        tape.record(out, rules)
    return out


def backward(loss):
    """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

    Repeated calls without clearing grads accumulate into leaf and
    intermediate grads alike; each pass keeps its own adjoint map so the
    passes stay independent.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward called with no active tape")

    adjoint = {id(loss): (loss, np.ones_like(loss.data))}
    for out, rules in reversed(tape.entries):
        rec = adjoint.pop(id(out), None)
        if rec is None:
            continue
        g = rec[1]
        if out.requires_grad:
            out._accumulate(g)
        for inp, vjp in rules:
            gi = vjp(g)
            prev = adjoint.get(id(inp))
            adjoint[id(inp)] = (inp, gi if prev is None else prev[1] + gi)
    # whatever is left never appeared as an op output on this tape: leaves
    for t, g in adjoint.values():
        if t.requires_grad:
            t._accumulate(g)


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    out = a.data @ b.data
    return _make_out(out, (a, b), (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def add(a, b):
    """Elementwise add; also accepts a [d] bias added to every row of [n, d]."""
    if a.shape == b.shape:
        return _make_out(a.data + b.data, (a, b), (lambda g: g, lambda g: g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make_out(a.data + b.data, (a, b), (lambda g: g, lambda g: g.sum(axis=0)))
    raise ShapeError(f"add: operand shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def sub(a, b):
    _check_same_shape(a, b, "sub")
    return _make_out(a.data - b.data, (a, b), (lambda g: g, lambda g: -g))


def mul(a, b):
    _check_same_shape(a, b, "mul")
    return _make_out(a.data * b.data, (a, b), (lambda g: g * b.data, lambda g: g * a.data))


def scale(a, c):
    c = float(c)
    return _make_out(a.data * c, (a,), (lambda g: g * c,))


def add_scalar(a, c):
    c = float(c)
    return _make_out(a.data + c, (a,), (lambda g: g,))


def relu(a):
    mask = a.data > 0  # subgradient 0 at 0
    return _make_out(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def sigmoid(a):
    out = _stable_sigmoid(a.data)
    return _make_out(out, (a,), (lambda g: g * out * (1.0 - out),))


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a):
    out = np.exp(a.data)
    return _make_out(out, (a,), (lambda g: g * out,))


def log1p(a):
    if np.any(a.data <= -1.0):
        raise ValueError("log1p: domain error, input <= -1")
    return _make_out(np.log1p(a.data), (a,), (lambda g: g / (1.0 + a.data),))


def square(a):
    return _make_out(a.data * a.data, (a,), (lambda g: g * 2.0 * a.data,))


def sqrt(a):
    if np.any(a.data < 0.0):
        raise ValueError("sqrt: domain error, negative input")
    out = np.sqrt(a.data)
    return _make_out(out, (a,), (lambda g: g * 0.5 / out,))


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {tuple(a.shape)}")
    return _make_out(a.data.T.copy(), (a,), (lambda g: g.T,))


def tsum(a):
    """Sum of all entries, as a scalar tensor."""
    return _make_out(np.asarray(a.data.sum()), (a,), (lambda g: np.broadcast_to(g, a.shape).copy(),))


def tmean(a):
    n = a.size
    return _make_out(np.asarray(a.data.mean()), (a,), (lambda g: np.broadcast_to(g / n, a.shape).copy(),))


def sum_cols(a):
    """Row sums of a matrix: [n, m] -> [n]."""
    if a.data.ndim != 2:
        raise ShapeError(f"sum_cols expects a matrix, got shape {tuple(a.shape)}")
    return _make_out(a.data.sum(axis=1), (a,), (lambda g: np.repeat(g[:, None], a.shape[1], axis=1),))


def concat_cols(a, b):
    """Concatenate two matrices with the same row count along columns."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: shapes {tuple(a.shape)} and {tuple(b.shape)} do not align")
    na = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make_out(out, (a, b), (lambda g: g[:, :na], lambda g: g[:, na:]))


def gather_pairs(a, rows, cols):
    """Select entries a[rows[k], cols[k]] -> vector of length k."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_pairs expects a matrix, got shape {tuple(a.shape)}")

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return out

    return _make_out(a.data[rows, cols], (a,), (vjp,))


def bce_with_logits(logits, labels):
    """Mean binary cross entropy in the numerically stable logits form.

    value = mean( max(z, 0) - z*y + log(1 + exp(-|z|)) ), labels y in {0, 1}.
    Differentiable in the logits only.
    """
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    z = logits.data
    if z.shape != y.shape:
        raise ShapeError(f"bce_with_logits: logits {tuple(z.shape)} vs labels {tuple(y.shape)}")
    if z.size == 0:
        raise ValueError("bce_with_logits: empty input")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("bce_with_logits: labels must be 0 or 1")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    return _make_out(np.asarray(per.mean()), (logits,),
                     (lambda g: g * (_stable_sigmoid(z) - y) / n,))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """Per-parameter first/second moment estimates plus a shared step count."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {k: np.zeros_like(_data_of(p)) for k, p in params.items()}
        self.v = {k: np.zeros_like(_data_of(p)) for k, p in params.items()}


def _data_of(p):
    return p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place.

    ``params`` maps names to Tensors (or arrays) and ``grads`` maps the same
    names to gradient arrays. A non-finite gradient aborts, naming the
    offending parameter.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        target = _data_of(p)
        target -= update
    return params, state


class Adam:
    """Convenience wrapper stepping from the grads stored on the tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = dict(params)
        self.state = AdamState(self.params, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self):
        grads = {}
        for name, p in self.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        adam_step(self.params, grads, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` takes no arguments and returns a scalar Tensor computed from
    the current values of ``params`` (name -> Tensor). The numeric probe
    re-evaluates ``loss_fn`` outside any tape, so it is independent of the
    backward rules it is checking.

    relative error = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    for p in params.values():
        p.grad = None
    with Tape():
        loss = loss_fn()
        backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().data)
            flat[i] = orig - h
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(ana[i] - numeric) / max(abs(ana[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
