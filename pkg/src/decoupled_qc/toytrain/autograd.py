"""A small reverse-mode differentiation engine over numpy arrays.

Only the handful of operations the toy segmentation network needs: 2D
convolutions (3x3 "same" and 1x1), leaky ReLU, 2x average pooling, nearest
2x upsampling, channel concatenation and a hook for externally computed loss
gradients. Arrays are NCHW.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = data
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(outputs: list[Tensor], grads: list[np.ndarray]) -> None:
    """Propagate ``grads`` (d loss / d output) back to every leaf parameter."""
    root = Tensor(None, parents=outputs)
    for out, g in zip(outputs, grads):
        _accumulate(out, g.astype(out.data.dtype, copy=False))
    for node in reversed(_toposort(root)):
        if node is root or node.backward_fn is None or node.grad is None:
            continue
        node.backward_fn(node.grad)
        if node.parents:
            node.grad = None  # free intermediate buffers


def _conv3x3_raw(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B, H, W, O
    return out.transpose(0, 3, 1, 2), win


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Zero-padded 3x3 correlation, stride 1."""
    raw, win = _conv3x3_raw(x.data, w.data)
    out_data = raw + b.data[None, :, None, None]

    def backward_fn(g):
        if w.requires_grad:
            _accumulate(w, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            flipped = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            _accumulate(x, _conv3x3_raw(g, np.ascontiguousarray(flipped))[0])

    return Tensor(out_data, (x, w, b), backward_fn)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-pixel linear map over channels; ``w`` is (out, in)."""
    out_data = np.einsum("oc,bchw->bohw", w.data, x.data) + b.data[None, :, None, None]

    def backward_fn(g):
        if w.requires_grad:
            _accumulate(w, np.einsum("bohw,bchw->oc", g, x.data))
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accumulate(x, np.einsum("oc,bohw->bchw", w.data, g))

    return Tensor(out_data, (x, w, b), backward_fn)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    out_data = np.where(pos, x.data, x.data * slope)

    def backward_fn(g):
        _accumulate(x, np.where(pos, g, g * slope))

    return Tensor(out_data, (x,), backward_fn)


def avg_pool2(x: Tensor) -> Tensor:
    b, c, h, w = x.data.shape
    out_data = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward_fn(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        _accumulate(x, up)

    return Tensor(out_data, (x,), backward_fn)


def upsample2(x: Tensor) -> Tensor:
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g):
        b, c, h, w = g.shape
        _accumulate(x, g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)))

    return Tensor(out_data, (x,), backward_fn)


def concat(tensors: list[Tensor]) -> Tensor:
    sizes = [t.data.shape[1] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=1)

    def backward_fn(g):
        start = 0
        for t, n in zip(tensors, sizes):
            _accumulate(t, g[:, start:start + n])
            start += n

    return Tensor(out_data, tuple(tensors), backward_fn)
