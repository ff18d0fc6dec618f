"""Micro autograd engine: just the ops the cascaded U-Net needs.

Tensors wrap ndarrays and record a backward closure; ``Tensor.backward``
walks the graph in reverse topological order. Ops preserve the input
dtype (float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

import numpy as np

from . import backend, nnkernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() starts from a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _make(out_data, parents, backward):
    out = Tensor(out_data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 1) -> Tensor:
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"channel mismatch: input {x.data.shape[1]}, weights {w.data.shape[1]}"
        )
    y, xp = nnkernels.conv2d_forward(x.data, w.data, b.data, padding)

    def backward(g):
        dx, dw, db = nnkernels.conv2d_backward(xp, w.data, g, padding)
        if x.requires_grad:
            x._accumulate(dx)
        if w.requires_grad:
            w._accumulate(dw)
        if b.requires_grad:
            b._accumulate(db)

    return _make(y, (x, w, b), backward)


def conv_transpose2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"channel mismatch: input {x.data.shape[1]}, weights {w.data.shape[0]}"
        )
    y = nnkernels.conv_transpose2_forward(x.data, w.data, b.data)

    def backward(g):
        dx, dw, db = nnkernels.conv_transpose2_backward(x.data, w.data, g)
        if x.requires_grad:
            x._accumulate(dx)
        if w.requires_grad:
            w._accumulate(dw)
        if b.requires_grad:
            b._accumulate(db)

    return _make(y, (x, w, b), backward)


def maxpool2(x: Tensor) -> Tensor:
    h, w = x.data.shape[2], x.data.shape[3]
    y, idx = nnkernels.maxpool2_forward(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(nnkernels.maxpool2_backward(g, idx, h, w))

    return _make(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _make(y, (x,), backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization. Train mode uses biased batch
    statistics (and folds them into the running buffers in place); eval
    mode normalizes with the running statistics."""
    c = x.data.shape[1]
    g = gamma.data.reshape(1, c, 1, 1)
    if train:
        if x.data.shape[0] < 2:
            raise ValueError("batchnorm2d train mode needs batch size >= 2")
        if backend.using_numba():
            return _batchnorm2d_train_numba(
                x, gamma, beta, running_mean, running_var, momentum, eps
            )
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        y = g * xhat + beta.data.reshape(1, c, 1, 1)

        def backward(gr):
            m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            dxhat = gr * g
            if gamma.requires_grad:
                gamma._accumulate((gr * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(gr.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                inv = inv_std.reshape(1, c, 1, 1)
                sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_dxhat_x = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_x)
                x._accumulate(dx.astype(x.data.dtype, copy=False))

    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        y = g * xhat + beta.data.reshape(1, c, 1, 1)

        def backward(gr):
            if gamma.requires_grad:
                gamma._accumulate((gr * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(gr.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accumulate(
                    (gr * g * inv_std.reshape(1, c, 1, 1)).astype(
                        x.data.dtype, copy=False
                    )
                )

    return _make(y.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)


def _batchnorm2d_train_numba(x, gamma, beta, running_mean, running_var,
                             momentum, eps):
    """Fused train-mode batch norm on the numba backend (identical math to
    the numpy path; per-channel sequential reductions keep it
    deterministic)."""
    mean, var = nnkernels._bn_stats_kernel(x.data)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var
    inv_std = 1.0 / np.sqrt(var + eps)
    y = np.empty_like(x.data)
    nnkernels._bn_normalize_kernel(
        x.data, mean, inv_std,
        gamma.data.astype(np.float64), beta.data.astype(np.float64), y,
    )

    def backward(gr):
        gr = np.ascontiguousarray(gr)
        s1, s2 = nnkernels._bn_backward_sums_kernel(x.data, gr, mean, inv_std)
        if gamma.requires_grad:
            gamma._accumulate(s2.astype(gamma.data.dtype))
        if beta.requires_grad:
            beta._accumulate(s1.astype(beta.data.dtype))
        if x.requires_grad:
            dx = np.empty_like(x.data)
            nnkernels._bn_backward_dx_kernel(
                x.data, gr, mean, inv_std, gamma.data.astype(np.float64),
                s1, s2, dx,
            )
            x._accumulate(dx)

    return _make(y, (x, gamma, beta), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    y = np.concatenate([a.data, b.data], axis=1)
    ca = a.data.shape[1]

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    return _make(y, (a, b), backward)


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over unmasked pixels only (mask True = excluded).

    Normalizes by the unmasked-pixel count, not the full grid size, so the
    building fraction does not rescale gradients.
    """
    target = np.asarray(target, dtype=pred.data.dtype)
    keep = ~np.broadcast_to(np.asarray(mask, dtype=bool), pred.data.shape)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("masked_mse needs at least one unmasked pixel")
    diff = np.where(keep, pred.data - target, 0)
    loss = (diff * diff).sum() / count

    def backward(g):
        if pred.requires_grad:
            pred._accumulate((2.0 / count) * diff * g)

    return _make(np.asarray(loss, dtype=pred.data.dtype), (pred,), backward)


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction, in place."""
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ValueError("adam_step shape mismatch")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a named parameter dict; state keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in params.items()
        }

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.state[name]
            adam_step(p.data, p.grad, m, v, self.t, self.lr, self.beta1,
                      self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
