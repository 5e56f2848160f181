"""Dense float64 tensors with reverse-mode autodiff.

Just enough machinery to train small encoder-decoder segmentation nets
deterministically on CPU: 3x3 same-padding convolution, 2x2 max pooling,
nearest-neighbor upsampling, relu/sigmoid, elementwise add and a fused
soft-Dice + BCE loss. All arithmetic is 64-bit.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError, UsageError


class Tensor:
    """An n-d float64 array plus an optional gradient and autodiff tape entry."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise UsageError("backward() requires a scalar tensor")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        # the _backward closures reference their output tensors, forming
        # reference cycles; break them so the graph frees without waiting
        # for a gc pass
        for node in topo:
            node._parents = ()
            node._backward = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation with zero padding 1, preserving spatial dims.

    x: [N,C,H,W], w: [F,C,3,3], b: [F] -> [N,F,H,W].
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ShapeError(f"conv2d rank mismatch: {x.dims}, {w.dims}, {b.dims}")
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d kernel must be 3x3, got {kh}x{kw}")
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {cw}")
    if b.data.shape[0] != f:
        raise ShapeError(f"conv2d bias length {b.data.shape[0]} != filters {f}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    acc = np.zeros((n, f, h, wd))
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di:di + h, dj:dj + wd]
            acc += np.einsum("nchw,fc->nfhw", patch, w.data[:, :, di, dj],
                             optimize=True)
    out = Tensor(acc + b.data[None, :, None, None], (x, w, b))

    def _bwd():
        g = out.grad
        b._accumulate(g.sum(axis=(0, 2, 3)))
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                patch = xp[:, :, di:di + h, dj:dj + wd]
                gw[:, :, di, dj] = np.einsum("nfhw,nchw->fc", g, patch,
                                             optimize=True)
                gxp[:, :, di:di + h, dj:dj + wd] += np.einsum(
                    "nfhw,fc->nchw", g, w.data[:, :, di, dj], optimize=True)
        w._accumulate(gw)
        x._accumulate(gxp[:, :, 1:1 + h, 1:1 + wd])

    out._backward = _bwd
    return out


def downsample2x(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient routes to the argmax (ties: first in row-major order)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"downsample2x expects [N,C,H,W], got {x.dims}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2x needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = (x.data.reshape(n, c, ho, 2, wo, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, ho, wo, 4))
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0],
                 (x,))

    def _bwd():
        gwin = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(gwin, idx[..., None], out.grad[..., None], axis=-1)
        gx = (gwin.reshape(n, c, ho, wo, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        x._accumulate(gx)

    out._backward = _bwd
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x replication; gradient sums the 4 replicas."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x expects [N,C,H,W], got {x.dims}")
    n, c, h, w = x.data.shape
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3), (x,))

    def _bwd():
        g = out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        x._accumulate(g)

    out._backward = _bwd
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), (x,))

    def _bwd():
        x._accumulate(out.grad * mask)

    out._backward = _bwd
    return out


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments, so it cannot overflow
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _stable_sigmoid(x.data)
    out = Tensor(s, (x,))

    def _bwd():
        x._accumulate(out.grad * s * (1.0 - s))

    out._backward = _bwd
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.dims} vs {b.dims}")
    out = Tensor(a.data + b.data, (a, b))

    def _bwd():
        a._accumulate(out.grad)
        b._accumulate(out.grad)

    out._backward = _bwd
    return out


def dice_bce_loss(logits: Tensor, target: np.ndarray,
                  smooth: float = 1e-5) -> Tensor:
    """Equally weighted soft-Dice + binary cross-entropy, from logits.

    BCE uses the numerically stable softplus form, so no probability
    clipping is needed and the loss stays smooth for gradient checking.
    """
    logits = _as_tensor(logits)
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ShapeError(
            f"loss target shape {list(t.shape)} != logits {logits.dims}")
    z = logits.data
    p = _stable_sigmoid(z)
    nel = z.size

    inter = (p * t).sum()
    denom = p.sum() + t.sum() + smooth
    dice = (2.0 * inter + smooth) / denom
    bce = (np.logaddexp(0.0, z) - t * z).sum() / nel
    out = Tensor(np.asarray((1.0 - dice) + bce), (logits,))

    def _bwd():
        g = float(out.grad)
        # d(1-dice)/dp, then chain through the sigmoid.
        ddice_dp = (2.0 * t * denom - (2.0 * inter + smooth)) / (denom * denom)
        dz = (-ddice_dp) * p * (1.0 - p) + (p - t) / nel
        logits._accumulate(g * dz)

    out._backward = _bwd
    return out


def grad_check(f, params, eps: float, *, max_entries_per_tensor=None,
               seed: int = 0) -> float:
    """Max relative error between analytic and central finite-difference grads.

    ``f`` maps a StateDict (layer name -> Tensor) to a scalar Tensor.
    ``max_entries_per_tensor`` limits the coordinates probed per parameter
    tensor (seeded sample); None probes every coordinate.
    """
    if not (0.0 < eps <= 1e-2):
        raise UsageError(f"eps must be in (0, 1e-2], got {eps}")
    tensors = list(params.tensors())
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NumericError("non-finite parameter value")
        t.zero_grad()

    loss = f(params)
    if not np.isfinite(loss.data):
        raise NumericError("non-finite loss")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]
    for t in tensors:
        t.zero_grad()

    rng = np.random.default_rng(seed)
    max_err = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        size = flat.size
        if max_entries_per_tensor is None or size <= max_entries_per_tensor:
            coords = range(size)
        else:
            coords = rng.choice(size, size=max_entries_per_tensor,
                                replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(params).data)
            flat[i] = orig - eps
            lo = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("non-finite loss during finite differences")
            numeric = (hi - lo) / (2.0 * eps)
            an = a.reshape(-1)[i]
            err = abs(an - numeric) / max(1.0, abs(an), abs(numeric))
            max_err = max(max_err, err)
    return max_err
