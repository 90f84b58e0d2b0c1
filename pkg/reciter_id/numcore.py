"""
Minimal differentiable numerical core.

Tensors wrap numpy arrays and record the operator graph that produced them;
``backward`` walks that graph in reverse topological order and accumulates
gradients into every leaf tensor created with ``requires_grad=True``.

Storage precision is float32 by default. ``precision(np.float64)`` switches
newly created tensors to 64-bit, which gradient checks and determinism tests
rely on. ``debug_mode()`` turns on NaN/Inf guards at every operator boundary.
"""
from contextlib import contextmanager
from dataclasses import dataclass, field
import numpy as np

from .errors import (AllFramesInvalid, BadTarget, GraphCycle, InputTooShort,
                     NonFiniteValue, NonPositiveWeight, NotScalar, ShapeMismatch)


_settings = {
    'dtype': np.float32,
    'debug': False,
    'grad_enabled': True,
}


def get_dtype():
    return _settings['dtype']


def set_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f'Unsupported storage dtype {dtype}')
    _settings['dtype'] = dtype


def set_debug(flag):
    _settings['debug'] = bool(flag)


@contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype of newly created tensors."""
    previous = _settings['dtype']
    set_dtype(dtype)
    try:
        yield
    finally:
        _settings['dtype'] = previous


@contextmanager
def debug_mode(flag=True):
    previous = _settings['debug']
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(previous)


@contextmanager
def no_grad():
    """Build no graph inside this block (evaluation passes)."""
    previous = _settings['grad_enabled']
    _settings['grad_enabled'] = False
    try:
        yield
    finally:
        _settings['grad_enabled'] = previous


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f'Non-finite value produced by operator {op!r}')


class Tensor:
    """n-dimensional real array participating in the operator graph."""

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.array(data, dtype=dtype or get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = 'leaf'

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.requires_grad = _settings['grad_enabled'] and any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        if _settings['debug']:
            _check_finite(out.data, op)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f'Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})'

    # Arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # Reductions and shape
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Reverse-mode engine
# ---------------------------------------------------------------------------

def _topological_order(root):
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        status = state.get(key, 0)
        if status == 2:
            continue
        if status == 1:
            raise GraphCycle(f'Cycle detected at operator {node._op!r}')
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            if state.get(id(parent), 0) != 2:
                stack.append((parent, False))
    return order


def backward(loss):
    """
    Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that
    requires a gradient. Gradients accumulate until ``zero_grad``.
    """
    if loss.data.size != 1:
        raise NotScalar(f'backward() needs a scalar loss, got shape {loss.shape}')
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# Elementwise and structural operators
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Tensor._from_op(a.data + b.data, (a, b), _backward, 'add')


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return Tensor._from_op(a.data - b.data, (a, b), _backward, 'sub')


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return Tensor._from_op(a.data * b.data, (a, b), _backward, 'mul')


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def _backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return Tensor._from_op(a.data / b.data, (a, b), _backward, 'div')


def power(a, exponent):
    a = _as_tensor(a)
    exponent = float(exponent)

    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)
    return Tensor._from_op(a.data ** exponent, (a,), _backward, 'pow')


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)

    def _backward(g):
        return (g * out,)
    return Tensor._from_op(out, (a,), _backward, 'exp')


def log(a):
    a = _as_tensor(a)

    def _backward(g):
        return (g / a.data,)
    return Tensor._from_op(np.log(a.data), (a,), _backward, 'log')


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def _backward(g):
        return (g * (1.0 - out * out),)
    return Tensor._from_op(out, (a,), _backward, 'tanh')


def clamp_min(a, low):
    a = _as_tensor(a)
    keep = a.data > low

    def _backward(g):
        return (g * keep,)
    return Tensor._from_op(np.where(keep, a.data, low).astype(a.dtype), (a,), _backward, 'clamp_min')


def vector_norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def _backward(g):
        g = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, g * a.data / safe, 0.0),)
    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return Tensor._from_op(out, (a,), _backward, 'norm')


def where(condition, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    condition = np.asarray(condition, dtype=bool)

    def _backward(g):
        return (_unbroadcast(np.where(condition, g, 0.0), a.shape),
                _unbroadcast(np.where(condition, 0.0, g), b.shape))
    out = np.where(condition, a.data, b.data)
    return Tensor._from_op(out, (a, b), _backward, 'where')


def straight_through(soft, hard_value):
    """Forward value ``hard_value``; gradient passed unchanged to ``soft``."""
    hard_value = np.asarray(hard_value, dtype=soft.dtype)
    if hard_value.shape != soft.shape:
        raise ShapeMismatch(f'straight_through shapes {soft.shape} vs {hard_value.shape}')

    def _backward(g):
        return (g,)
    return Tensor._from_op(hard_value, (soft,), _backward, 'straight_through')


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward, 'sum')


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a, shape):
    a = _as_tensor(a)

    def _backward(g):
        return (g.reshape(a.shape),)
    return Tensor._from_op(a.data.reshape(shape), (a,), _backward, 'reshape')


def transpose(a, axes=None):
    a = _as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)

    def _backward(g):
        return (np.transpose(g, inverse),)
    return Tensor._from_op(np.transpose(a.data, axes), (a,), _backward, 'transpose')


def swapaxes(a, axis1, axis2):
    a = _as_tensor(a)

    def _backward(g):
        return (np.swapaxes(g, axis1, axis2),)
    return Tensor._from_op(np.swapaxes(a.data, axis1, axis2), (a,), _backward, 'swapaxes')


def getitem(a, index):
    a = _as_tensor(a)

    def _backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return Tensor._from_op(a.data[index], (a,), _backward, 'getitem')


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(out, tensors, _backward, 'concat')


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]

    def _backward(g):
        return tuple(np.moveaxis(g, axis, 0))
    out = np.stack([t.data for t in tensors], axis=axis)
    return Tensor._from_op(out, tensors, _backward, 'stack')


def matmul(a, b):
    """Batched matrix product with numpy broadcasting; ``a`` may be a vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f'matmul shapes {a.shape} and {b.shape} do not agree')
    vector = a.ndim == 1
    left = a.data[None, :] if vector else a.data
    out = np.matmul(left, b.data)

    def _backward(g):
        if vector:
            g = np.expand_dims(g, -2)
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), left.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(left, -1, -2), g), b.shape)
        return ga.reshape(a.shape), gb
    if vector:
        out = out[..., 0, :]
    return Tensor._from_op(out, (a, b), _backward, 'matmul')


# ---------------------------------------------------------------------------
# Named primitives
# ---------------------------------------------------------------------------

def linear(x, W, b=None):
    """y = xW + b over the last axis of ``x``."""
    x, W = _as_tensor(x), _as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f'linear: input {x.shape} vs weight {W.shape}')
    y = matmul(x, W)
    if b is None:
        return y
    b = _as_tensor(b)
    if b.shape != (W.shape[1],):
        raise ShapeMismatch(f'linear: bias {b.shape} vs weight {W.shape}')
    return y + b


def conv1d_output_length(time, width, stride):
    return (time - width) // stride + 1


def conv1d(x, K, stride=1):
    """
    Valid (no padding) cross-correlation.

    Parameters
    ----------
    x : Tensor[..., channels_in, time]
    K : Tensor[channels_out, channels_in, width]
    stride : int
    """
    x, K = _as_tensor(x), _as_tensor(K)
    if K.ndim != 3 or x.ndim < 2 or x.shape[-2] != K.shape[1]:
        raise ShapeMismatch(f'conv1d: input {x.shape} vs kernel {K.shape}')
    if stride < 1:
        raise ValueError(f'conv1d stride must be >= 1, got {stride}')
    c_out, c_in, width = K.shape
    time = x.shape[-1]
    if time < width:
        raise InputTooShort(f'conv1d: {time} samples is shorter than kernel width {width}')
    lead = x.shape[:-2]
    t_out = conv1d_output_length(time, width, stride)
    index = np.arange(t_out)[:, None] * stride + np.arange(width)[None, :]
    patches = x.data[..., index]
    cols = np.moveaxis(patches, -3, -2).reshape(*lead, t_out, c_in * width)
    kmat = K.data.reshape(c_out, c_in * width)
    out = np.swapaxes(np.matmul(cols, kmat.T), -1, -2)

    def _backward(g):
        g_t = np.swapaxes(g, -1, -2)
        g_kernel = (g_t.reshape(-1, c_out).T @ cols.reshape(-1, c_in * width)).reshape(K.shape)
        g_cols = np.matmul(g_t, kmat).reshape(*lead, t_out, c_in, width)
        g_patches = np.moveaxis(g_cols, -3, -2)
        g_x = np.zeros_like(x.data)
        stop = stride * (t_out - 1) + 1
        for k in range(width):
            g_x[..., k:k + stop:stride] += g_patches[..., k]
        return g_x, g_kernel
    return Tensor._from_op(out, (x, K), _backward, 'conv1d')


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis with biased variance, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f'layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}')
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = x_hat * gamma.data + beta.data

    def _backward(g):
        g_gamma = (g * x_hat).reshape(-1, d).sum(axis=0)
        g_beta = g.reshape(-1, d).sum(axis=0)
        d_hat = g * gamma.data
        g_x = inv_std * (d_hat - d_hat.mean(axis=-1, keepdims=True)
                         - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True))
        return g_x, g_gamma, g_beta
    return Tensor._from_op(out, (x, gamma, beta), _backward, 'layer_norm')


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """tanh approximation 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))."""
    x = _as_tensor(x)
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    out = 0.5 * v * (1.0 + t)

    def _backward(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)
    return Tensor._from_op(out, (x,), _backward, 'gelu')


def softmax(x, mask=None):
    """
    Softmax over the last axis. ``mask`` (broadcastable, True = keep)
    excludes entries; they receive probability exactly 0.
    """
    x = _as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    top = z.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(z - top)
    total = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return Tensor._from_op(out, (x,), _backward, 'softmax')


def log_softmax(x):
    x = _as_tensor(x)
    top = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - top
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)
    return Tensor._from_op(out, (x,), _backward, 'log_softmax')


def weighted_cross_entropy(logits, targets, weights):
    """
    Weighted mean of -log softmax(logits)[target]:
    sum_i w[t_i] * nll_i / sum_i w[t_i].
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    weights = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or logits.shape[0] == 0:
        raise ShapeMismatch(f'cross entropy: logits {logits.shape} vs targets {targets.shape}')
    n_classes = logits.shape[1]
    if weights.shape != (n_classes,):
        raise ShapeMismatch(f'cross entropy: weights {weights.shape} for {n_classes} classes')
    if np.any((targets < 0) | (targets >= n_classes)):
        raise BadTarget(f'targets must lie in 0..{n_classes - 1}')
    if np.any(weights <= 0):
        raise NonPositiveWeight('class weights must be positive')
    picked = log_softmax(logits)[np.arange(len(targets)), targets]
    w = weights[targets].astype(logits.dtype)
    return -(picked * w).sum() / float(w.sum())


def cross_entropy(logits, targets):
    logits = _as_tensor(logits)
    return weighted_cross_entropy(logits, targets, np.ones(logits.shape[-1], dtype=logits.dtype))


def cosine_similarity(a, b, eps=1e-8):
    """a.b / (max(|a|, eps) max(|b|, eps)) along the last axis (broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeMismatch(f'cosine_similarity: {a.shape} vs {b.shape}')
    dot = (a * b).sum(axis=-1)
    norm_a = clamp_min(vector_norm(a), eps)
    norm_b = clamp_min(vector_norm(b), eps)
    return dot / (norm_a * norm_b)


def mean_pool(x, valid_mask):
    """Mean over valid frames: x[..., time, d], valid_mask[..., time] -> [..., d]."""
    x = _as_tensor(x)
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ShapeMismatch(f'mean_pool: mask {mask.shape} vs frames {x.shape}')
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise AllFramesInvalid('mean_pool needs at least one valid frame')
    w = (mask / counts[..., None]).astype(x.dtype)
    return (x * w[..., None]).sum(axis=-2)


def gumbel_softmax(logits, temperature, seed, hard=False, noise=None):
    """
    softmax((logits + g) / temperature) with g ~ Gumbel(0, 1) drawn from a
    generator seeded by ``seed``. With ``hard`` the forward value is the
    one-hot argmax and the gradient is that of the soft sample.
    """
    logits = _as_tensor(logits)
    if temperature <= 0:
        raise ValueError(f'temperature must be positive, got {temperature}')
    if noise is None:
        noise = np.random.default_rng(seed).gumbel(size=logits.shape)
    noise = np.asarray(noise, dtype=logits.dtype)
    soft = softmax((logits + noise) / float(temperature))
    if not hard:
        return soft
    index = np.argmax(soft.data, axis=-1)
    one_hot = np.zeros_like(soft.data)
    np.put_along_axis(one_hot, index[..., None], 1.0, axis=-1)
    return straight_through(soft, one_hot)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """Bias-corrected Adam update applied in place to ``params``."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ShapeMismatch(f'{len(params)} parameters but {len(grads)} gradients')
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeMismatch('optimizer state does not match the parameter list')
    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f'gradient {g.shape} for parameter {p.shape}')
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)


class Adam:
    """Adam over a fixed list of parameter tensors, reading their ``grad``."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

OBJECTIVE_SCALE = 1e-2


def grad_check(op, input_shapes, seed, eps=1e-3, inputs=None):
    """
    Compare ``backward`` against five-point central finite differences.

    Parameters
    ----------
    op : callable
        Takes one Tensor per input and returns a Tensor. Non-scalar outputs
        are reduced with a fixed random projection.
    input_shapes : sequence of tuple
        Shapes of the standard-normal inputs drawn from ``seed``.
    inputs : sequence of array, optional
        Explicit input values; overrides the random draw.

    Returns
    -------
    float
        max over coordinates of |a - f| / max(|a|, |f|, 1e-8).
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        if inputs is None:
            inputs = [rng.standard_normal(shape) for shape in input_shapes]
        tensors = [Tensor(v, requires_grad=True) for v in inputs]
        out = op(*tensors)
        projection = None if out.size == 1 else rng.standard_normal(out.shape)

        # scaled down so roundoff at zero-gradient coordinates stays under the 1e-8 floor
        def objective(t):
            reduced = t.sum() if projection is None else (t * projection).sum()
            return reduced * OBJECTIVE_SCALE

        backward(objective(out))

        def evaluate():
            with no_grad():
                return float(objective(op(*tensors)).data)

        worst = 0.0
        for t in tensors:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                values = []
                for k in (2.0, 1.0, -1.0, -2.0):
                    flat[i] = original + k * eps
                    values.append(evaluate())
                flat[i] = original
                numeric = (-values[0] + 8.0 * values[1] - 8.0 * values[2] + values[3]) / (12.0 * eps)
                a = analytic.reshape(-1)[i]
                error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, error)
    return worst
