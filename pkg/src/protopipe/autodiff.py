"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a dynamic tape: each op stores a vector-Jacobian closure on
its output node, and `backward` replays the closures in reverse
topological order. Gradient accumulation is pass-local first, then added
into `.grad`, so calling `backward` twice without `zero_grads` doubles
the leaf gradients (the documented accumulation semantics) instead of
corrupting interior nodes.

Everything is float64. Broadcasting is deliberately limited to bias
addition; all other ops require exact shape agreement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class GraphError(RuntimeError):
    """The autodiff contract was violated (e.g. non-scalar loss)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad:
                stack.append((parent, False))
    local = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = local.pop(id(node))
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g
        if node._vjp is None:
            continue
        for parent, contribution in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or contribution is None:
                continue
            slot = local.get(id(parent))
            if slot is None:
                local[id(parent)] = contribution.copy()
            else:
                slot += contribution


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.data.shape}")
    return _node(x.data.T, (x,), lambda g: (g.T,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(c * x.data, (x,), lambda g: (c * g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    return _node(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum (not where) so NaN inputs propagate instead of zeroing
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row bias for [n,m]+[m], channel bias for [B,C,H,W]+[C]."""
    if b.data.ndim != 1:
        raise ShapeError(f"add_bias: bias must be a vector, got shape {b.data.shape}")
    if x.data.ndim == 2 and x.data.shape[1] == b.data.shape[0]:
        def vjp(g):
            return g, g.sum(axis=0)
        return _node(x.data + b.data, (x, b), vjp)
    if x.data.ndim == 4 and x.data.shape[1] == b.data.shape[0]:
        def vjp(g):
            return g, g.sum(axis=(0, 2, 3))
        return _node(x.data + b.data[None, :, None, None], (x, b), vjp)
    raise ShapeError(f"add_bias: cannot add bias {b.data.shape} to input {x.data.shape}")


def mean_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got shape {x.data.shape}")
    n = x.data.shape[0]
    return _node(
        x.data.mean(axis=0, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),),
    )


def spatial_mean(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C] mean over the spatial axes."""
    if x.data.ndim != 4:
        raise ShapeError(f"spatial_mean expects [B,C,H,W], got shape {x.data.shape}")
    b, c, h, w = x.data.shape

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),)

    return _node(x.data.mean(axis=(2, 3)), (x,), vjp)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"concat_rows: shape mismatch {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[0]
    return _node(
        np.concatenate([a.data, b.data], axis=0),
        (a, b),
        lambda g: (g[:na], g[na:]),
    )


def l2_normalize(x: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Divide each row by max(l2-norm, epsilon)."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize expects a matrix, got shape {x.data.shape}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1))
    r = np.maximum(norms, epsilon)
    y = x.data / r[:, None]

    def vjp(g):
        gx = g / r[:, None]
        free = norms > epsilon
        # rows above epsilon get the exact projected Jacobian; clamped rows
        # are plain scaling by 1/epsilon
        dot = np.sum(g * y, axis=1)
        gx[free] -= (dot[:, None] * y / r[:, None])[free]
        return (gx,)

    return _node(y, (x,), vjp)


def conv2d_3x3(x: Tensor, w: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (preserves H and W)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d_3x3 input must be [B,C,H,W], got shape {x.data.shape}")
    if w.data.ndim != 4 or w.data.shape[1:] != (x.data.shape[1], 3, 3):
        raise ShapeError(
            f"conv2d_3x3 kernels must be [F,{x.data.shape[1]},3,3], got shape {w.data.shape}"
        )
    if x.data.shape[2] < 1 or x.data.shape[3] < 1:
        raise ShapeError(f"conv2d_3x3 needs H,W >= 1, got shape {x.data.shape}")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)

    def vjp(g):
        return kernels.conv3x3_backward(xd, wd, np.ascontiguousarray(g))

    return _node(kernels.conv3x3_forward(xd, wd), (x, w), vjp)


def maxpool_2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; caller guarantees even H and W."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool_2x2 input must be [B,C,H,W], got shape {x.data.shape}")
    _, _, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool_2x2 needs even H,W, got shape {x.data.shape}")
    y, idx = kernels.maxpool2x2_forward(np.ascontiguousarray(x.data))

    def vjp(g):
        return (kernels.maxpool2x2_backward(idx, np.ascontiguousarray(g), h, w),)

    return _node(y, (x,), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label], row-max stabilized."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.data.shape} vs labels {labels.shape}"
        )
    n, k = logits.data.shape
    if n < 1:
        raise ValueError("softmax_cross_entropy needs at least one row")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    lse = np.log(ez.sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    softmax = ez / ez.sum(axis=1, keepdims=True)

    def vjp(g):
        gl = softmax.copy()
        gl[rows, labels] -= 1.0
        return (gl * (float(g) / n),)

    return _node(loss, (logits,), vjp)


def softmax_cross_entropy_masked(logits: Tensor, targets, forbidden) -> Tensor:
    """Cross-entropy where `forbidden` entries are excluded from the softmax.

    Used by the contrastive loss to drop each anchor's self-similarity.
    Targets must not be forbidden.
    """
    targets = np.asarray(targets, dtype=np.int64)
    forbidden = np.asarray(forbidden, dtype=bool)
    if logits.data.shape != forbidden.shape or targets.shape != (logits.data.shape[0],):
        raise ShapeError("softmax_cross_entropy_masked: inconsistent shapes")
    n = logits.data.shape[0]
    rows = np.arange(n)
    if forbidden[rows, targets].any():
        raise ValueError("target entries must not be forbidden")
    masked = np.where(forbidden, -np.inf, logits.data)
    z = masked - masked.max(axis=1, keepdims=True)
    ez = np.where(forbidden, 0.0, np.exp(z))
    denom = ez.sum(axis=1)
    loss = float(np.mean(np.log(denom) - z[rows, targets]))
    softmax = ez / denom[:, None]

    def vjp(g):
        gl = softmax.copy()
        gl[rows, targets] -= 1.0
        return (gl * (float(g) / n),)

    return _node(loss, (logits,), vjp)


# ---------------------------------------------------------------------------
# verification oracle

def grad_check(op, inputs, h: float = 1e-5, probe_seed: int = 0x5EED) -> float:
    """Max relative error of the analytic gradient vs central differences.

    `op` maps one or more Tensors to a Tensor; the output is contracted to
    a scalar with a fixed random probe so that backward() applies. The
    numeric side re-evaluates only the forward pass, keeping the oracle
    independent of the tape.
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError("h must lie in (0, 1e-3]")
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in tensors:
        t.requires_grad = True
    out = op(*tensors)
    probe = np.random.default_rng(probe_seed).standard_normal(out.data.shape)

    def scalar():
        return float(np.sum(op(*tensors).data * probe))

    zero_grads(tensors)
    backward(sum_all(mul(out, Tensor(probe))))
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar()
            flat[i] = orig - h
            fm = scalar()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """Per-parameter moment buffers for the bias-corrected Adam update."""

    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1: float = 0.9, beta2: float = 0.999,
                   epsilon: float = 1e-8) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            beta1=beta1, beta2=beta2, epsilon=epsilon,
        )


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. lr=0 is a bitwise no-op."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if len(params) != len(state.first_moment):
        raise ShapeError("adam_step: state does not match parameter list")
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        g = np.zeros_like(p.data) if g is None else g
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
