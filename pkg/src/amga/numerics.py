"""Value-semantic tensor core with an explicit gradient tape.

Tensors wrap owned numpy arrays (float32 by default; float64 is accepted
for verification work such as finite-difference oracles).  Elementwise
arithmetic stays in the storage dtype; every reduction (matmul, conv,
softmax sums, losses, pooling means) accumulates in float64 and rounds
once on output.

Differentiable ops take an optional ``tape``.  An op records itself when
a tape is passed and any operand requires grad; ``backward`` then replays
the tape in exact reverse order.  Gradients of tensors that never made it
onto the tape are zero.  Nothing here is global: tapes and tensors are
plain objects and can move freely between threads (a single tape must not
be mutated concurrently).

There is no broadcasting except bias addition (dense row bias, conv
channel bias); any other shape mismatch raises DimensionError.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

_LOG_FLOOR = 1e-12  # cross-entropy probability floor


def _as_storage(data, dtype=None):
    arr = np.asarray(data)
    if dtype is None:
        # float32 unless the caller hands over an explicit float64 ndarray
        if isinstance(data, np.ndarray) and arr.dtype == np.float64:
            dtype = np.float64
        else:
            dtype = np.float32
    return np.array(arr, dtype=dtype, copy=True)


class Tensor:
    """Owned n-d float array, optionally participating in gradient tapes."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_storage(data, dtype)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered op log; replayed back-to-front by ``backward``."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops = []

    def record(self, out: Tensor, pulls):
        """pulls: list of (input_tensor, fn) where fn(grad_out) -> grad contribution.

        The output tensor is held by the tape so tensor identities stay
        unique for the tape's lifetime.
        """
        self._ops.append((out, [(t, fn) for t, fn in pulls if t.requires_grad]))

    def __len__(self):
        return len(self._ops)


class Gradients:
    """Gradient lookup by tensor identity; off-tape tensors read as zero."""

    def __init__(self, table):
        self._table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._table.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g


def backward(loss: Tensor, tape: GradTape) -> Gradients:
    """Reverse accumulation from a scalar loss over the given tape."""
    if loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    table = {id(loss): np.ones((), dtype=loss.dtype)}
    for out, pulls in reversed(tape._ops):
        g = table.get(id(out))
        if g is None:
            continue
        for t, fn in pulls:
            contrib = fn(g)
            prev = table.get(id(t))
            if prev is None:
                table[id(t)] = contrib.astype(t.dtype, copy=True)
            else:
                prev += contrib.astype(t.dtype, copy=False)
    return Gradients(table)


def _check_same_dtype(*tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise DimensionError(f"mixed tensor dtypes {sorted(d.name for d in dtypes)}")


def _maybe_record(tape, out, pulls):
    if tape is not None and any(t.requires_grad for t, _ in pulls):
        out.requires_grad = True
        tape.record(out, pulls)
    else:
        out.requires_grad = any(t.requires_grad for t, _ in pulls)
    return out


# ---------------------------------------------------------------------------
# raw kernels (ndarray in, ndarray out) — shared by Tensor ops and the
# no-grad inference paths in the zoo and tracker


def dense_raw(x, w, b):
    out = np.matmul(x, w, dtype=np.float64)
    if b is not None:
        out = out + b.astype(np.float64)
    return out.astype(x.dtype)


def _conv_windows(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    return win  # (B, C, oh, ow, kh, kw), a view


def conv2d_raw(x, k, stride, padding):
    kh, kw = k.shape[2], k.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _conv_windows(xp, kh, kw, stride)
    out = np.einsum("bcijuv,ocuv->boij", win, k, dtype=np.float64, optimize=True)
    return out.astype(x.dtype)


def relu_raw(x):
    return np.maximum(x, 0)


def maxpool_raw(x, k):
    win = _conv_windows(x, k, k, k)
    b, c, oh, ow = win.shape[:4]
    flat = win.reshape(b, c, oh, ow, k * k)
    return flat.max(axis=4)


def avgpool_raw(x, k):
    win = _conv_windows(x, k, k, k)
    return win.mean(axis=(4, 5), dtype=np.float64).astype(x.dtype)


def softmax_raw(z):
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp((z - zmax).astype(np.float64))
    return (e / e.sum(axis=-1, keepdims=True)).astype(z.dtype)


# ---------------------------------------------------------------------------
# differentiable ops


def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = Tensor(a.data + b.data)
    return _maybe_record(tape, out, [(a, lambda g: g), (b, lambda g: g)])


def mul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _maybe_record(tape, out, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def sum_all(a: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype))
    shape = a.shape
    return _maybe_record(tape, out, [(a, lambda g: np.broadcast_to(g, shape))])


def dense_forward(x: Tensor, w: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Affine map: x[batch, in] @ w[in, out] + b[out]."""
    _check_same_dtype(x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense input {tuple(x.shape)} incompatible with weights {tuple(w.shape)}")
    if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise DimensionError(f"dense bias {tuple(b.shape)} incompatible with weights {tuple(w.shape)}")
    out = Tensor(dense_raw(x.data, w.data, b.data))
    xd, wd = x.data, w.data
    return _maybe_record(
        tape,
        out,
        [
            (x, lambda g: np.matmul(g, wd.T, dtype=np.float64)),
            (w, lambda g: np.matmul(xd.T, g, dtype=np.float64)),
            (b, lambda g: g.sum(axis=0, dtype=np.float64)),
        ],
    )


def _col2im_add(acc, gwin, stride):
    # acc: (B, C, Hp, Wp); gwin: (B, C, oh, ow, kh, kw)
    oh, ow, kh, kw = gwin.shape[2], gwin.shape[3], gwin.shape[4], gwin.shape[5]
    for u in range(kh):
        for v in range(kw):
            acc[:, :, u : u + stride * (oh - 1) + 1 : stride,
                v : v + stride * (ow - 1) + 1 : stride] += gwin[:, :, :, :, u, v]
    return acc


def conv2d_forward(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0,
                   tape: GradTape | None = None) -> Tensor:
    """Cross-correlation of x[batch,c,h,w] with k[o,c,kh,kw]; zero padding."""
    _check_same_dtype(x, k)
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv input {tuple(x.shape)} incompatible with kernel {tuple(k.shape)}")
    kh, kw = k.shape[2], k.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv kernel dims must be odd, got {tuple(k.shape)}")
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(
            f"kernel {tuple(k.shape)} larger than padded input {tuple(x.shape)} (padding={padding})")
    out = Tensor(conv2d_raw(x.data, k.data, stride, padding))
    xd, kd = x.data, k.data

    def pull_x(g):
        gwin = np.einsum("boij,ocuv->bcijuv", g, kd, dtype=np.float64, optimize=True)
        acc = np.zeros((xd.shape[0], xd.shape[1], hp, wp), dtype=np.float64)
        _col2im_add(acc, gwin, stride)
        if padding:
            acc = acc[:, :, padding:-padding, padding:-padding]
        return acc

    def pull_k(g):
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = _conv_windows(xp, kh, kw, stride)
        return np.einsum("boij,bcijuv->ocuv", g, win, dtype=np.float64, optimize=True)

    return _maybe_record(tape, out, [(x, pull_x), (k, pull_k)])


def bias_add_channels(x: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Per-channel bias on x[batch,c,h,w]; the one sanctioned broadcast besides dense bias."""
    _check_same_dtype(x, b)
    if x.data.ndim != 4 or b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"channel bias {tuple(b.shape)} incompatible with input {tuple(x.shape)}")
    out = Tensor(x.data + b.data[None, :, None, None])
    return _maybe_record(
        tape, out,
        [(x, lambda g: g), (b, lambda g: g.sum(axis=(0, 2, 3), dtype=np.float64))],
    )


def relu(x: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor(relu_raw(x.data))
    mask = x.data > 0  # subgradient at 0 is 0
    return _maybe_record(tape, out, [(x, lambda g: g * mask)])


def maxpool2d(x: Tensor, k: int, tape: GradTape | None = None) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise DimensionError(f"maxpool window {k} does not tile input {tuple(x.shape)}")
    win = _conv_windows(x.data, k, k, k)
    b, c, oh, ow = win.shape[:4]
    flat = win.reshape(b, c, oh, ow, k * k)
    arg = flat.argmax(axis=4)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=4)[..., 0])

    def pull(g):
        gwin = (arg[..., None] == np.arange(k * k)) * g[..., None]
        gwin = gwin.reshape(b, c, oh, ow, k, k)
        acc = np.zeros(x.shape, dtype=np.float64)
        return _col2im_add(acc, gwin, k)

    return _maybe_record(tape, out, [(x, pull)])


def avgpool2d(x: Tensor, k: int, tape: GradTape | None = None) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise DimensionError(f"avgpool window {k} does not tile input {tuple(x.shape)}")
    out = Tensor(avgpool_raw(x.data, k))

    def pull(g):
        g2 = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return g2 / (k * k)

    return _maybe_record(tape, out, [(x, pull)])


def flatten(x: Tensor, tape: GradTape | None = None) -> Tensor:
    shape = x.shape
    out = Tensor(x.data.reshape(shape[0], -1))
    return _maybe_record(tape, out, [(x, lambda g: g.reshape(shape))])


def softmax(logits: Tensor, tape: GradTape | None = None) -> Tensor:
    """Row softmax of logits[batch, classes], max-subtracted for stability."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"softmax expects [batch, classes>=2], got {tuple(logits.shape)}")
    return _softmax_any(logits, tape)


def simplex_weights(logits: Tensor, tape: GradTape | None = None) -> Tensor:
    """Softmax over a 1-d logit vector (length >= 1); used for ensemble weights."""
    if logits.data.ndim != 1 or logits.shape[0] < 1:
        raise DimensionError(f"simplex_weights expects a non-empty vector, got {tuple(logits.shape)}")
    return _softmax_any(logits, tape)


def _softmax_any(logits, tape):
    p = softmax_raw(logits.data)
    out = Tensor(p)

    def pull(g):
        inner = (g * p).sum(axis=-1, keepdims=True, dtype=np.float64)
        return p * (g - inner)

    return _maybe_record(tape, out, [(logits, pull)])


def cross_entropy(probabilities: Tensor, labels, tape: GradTape | None = None) -> Tensor:
    """Mean over the batch of -log(p[label] + 1e-12)."""
    p = probabilities.data
    if p.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch, classes], got {tuple(p.shape)}")
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != p.shape[0]:
        raise DimensionError(f"labels shape {tuple(y.shape)} does not match batch {p.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise IndexError(f"label out of range [0, {p.shape[1]}): {y.tolist()}")
    batch = p.shape[0]
    picked = p[np.arange(batch), y].astype(np.float64) + _LOG_FLOOR
    out = Tensor(np.asarray(-np.log(picked).mean(), dtype=p.dtype))

    def pull(g):
        gp = np.zeros(p.shape, dtype=np.float64)
        gp[np.arange(batch), y] = -float(g) / (batch * picked)
        return gp

    return _maybe_record(tape, out, [(probabilities, pull)])


def weighted_sum(tensors, weights: Tensor, tape: GradTape | None = None) -> Tensor:
    """Linear mix sum_i weights[i] * tensors[i] over same-shape tensors."""
    if weights.data.ndim != 1 or len(tensors) != weights.shape[0]:
        raise DimensionError(
            f"weights {tuple(weights.shape)} do not match {len(tensors)} tensors")
    _check_same_dtype(weights, *tensors)
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"weighted_sum shapes differ: {tuple(shape)} vs {tuple(t.shape)}")
    w = weights.data.astype(np.float64)
    acc = np.zeros(shape, dtype=np.float64)
    for wi, t in zip(w, tensors):
        acc += wi * t.data
    out = Tensor(acc.astype(tensors[0].dtype))

    pulls = [(t, (lambda wi: lambda g: wi * g)(wi)) for wi, t in zip(w, tensors)]
    datas = [t.data for t in tensors]

    def pull_w(g):
        return np.array([(g * d).sum(dtype=np.float64) for d in datas])

    pulls.append((weights, pull_w))
    return _maybe_record(tape, out, pulls)


def gather_spatial(x: Tensor, index_map: np.ndarray, tape: GradTape | None = None) -> Tensor:
    """Remap the trailing two (spatial) dims of x through flat indices.

    index_map holds flat indices into the input's h*w plane, or -1 for
    zero-fill; the map is shared across all leading dims.  Backward
    scatter-adds, so duplicate sources are safe.
    """
    h, w = x.shape[-2], x.shape[-1]
    idx = np.asarray(index_map, dtype=np.int64)
    lead = x.shape[:-2]
    flat_in = x.data.reshape(lead + (h * w,))
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out_data = flat_in[..., safe.reshape(-1)].reshape(lead + idx.shape)
    out_data = np.where(valid, out_data, 0).astype(x.dtype)
    out = Tensor(out_data)

    def pull(g):
        lead_n = int(np.prod(lead)) if lead else 1
        g2 = g.reshape(lead_n, -1)
        gflat = np.zeros((lead_n, h * w), dtype=np.float64)
        vmask = valid.reshape(-1)
        src = safe.reshape(-1)[vmask]
        for c in range(lead_n):
            np.add.at(gflat[c], src, g2[c, vmask])
        return gflat.reshape(x.shape)

    return _maybe_record(tape, out, [(x, pull)])


def finite_diff_gradient(f, x: Tensor, step: float) -> Tensor:
    """Central-difference gradient of a scalar function, element by element."""
    if step <= 0:
        raise ValueError(f"finite difference step must be positive, got {step}")
    base = x.data
    grad = np.zeros(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        fp = f(Tensor((flat + bump).reshape(base.shape), dtype=base.dtype)).item()
        fm = f(Tensor((flat - bump).reshape(base.shape), dtype=base.dtype)).item()
        grad[i] = (fp - fm) / (2.0 * step)
    return Tensor(grad.reshape(base.shape), dtype=base.dtype)
