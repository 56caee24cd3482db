"""Reverse-mode differentiation over masked networks.

Supports exactly the primitives the lab's models need: masked dense and
masked 2D convolution (stride 1), ReLU, tanh, 2x2 max-pool, flatten, and a
fused softmax cross-entropy head. A quadratic head (0.5 (z-c)^T A (z-c),
averaged over the batch) is provided for diagnostics and calibration.

`forward` records a tape; `backward` consumes it and returns the flat
gradient with masked-out weight entries forced to zero (the raw, unmasked
gradient is available for connection-growth criteria). `hvp` computes exact
Hessian-vector products over the active coordinates by forward-mode
differentiation of the reverse pass.

Everything is float64.
"""

import numpy as np

from . import kernels
from .errors import NonFiniteInput, ShapeMismatch, TapeConsumed
from .network import (
    ActivationLayer,
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    MaxPoolLayer,
    active_bool,
    active_indices,
    embed_active,
    param_layout,
)


class SoftmaxCrossEntropy:
    """Mean softmax cross-entropy over the batch (log-sum-exp stabilized)."""


class QuadraticHead:
    """L = mean_b 0.5 (z_b - target)^T A (z_b - target); A defaults to identity."""

    def __init__(self, matrix=None, target=None):
        self.matrix = None if matrix is None else np.asarray(matrix, dtype=float)
        self.target = None if target is None else np.asarray(target, dtype=float)


class ComputationTape:
    """Forward-pass record sufficient to run one backward pass."""

    def __init__(self, net, head, records, head_cache, loss):
        self.net = net
        self.head = head
        self.records = records  # [(layer, cache), ...] in forward order
        self.head_cache = head_cache
        self.loss = loss
        self.consumed = False


def _check_batch(net, batch, labels, head):
    batch = np.asarray(batch, dtype=float)
    if batch.shape[1:] != net.input_shape:
        raise ShapeMismatch(
            f"batch item shape {batch.shape[1:]} does not match network input {net.input_shape}",
            layer=0,
        )
    if not np.isfinite(batch).all():
        raise NonFiniteInput("batch contains NaN or infinite values")
    if isinstance(head, SoftmaxCrossEntropy):
        labels = np.asarray(labels)
        if labels.ndim != 1 or labels.shape[0] != batch.shape[0]:
            raise ShapeMismatch(
                f"labels length {labels.shape} does not match batch size {batch.shape[0]}"
            )
    return batch, labels


def _softmax_stats(z):
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    lse = m + np.log(ez.sum(axis=1, keepdims=True))
    return np.exp(z - lse), lse


def forward(net, batch, labels=None, head=None):
    """Run the network on a batch; returns (loss, tape).

    `labels` are integer class ids for the softmax cross-entropy head and are
    ignored by a quadratic head.
    """
    head = head if head is not None else SoftmaxCrossEntropy()
    x, labels = _check_batch(net, batch, labels, head)
    records = []
    a = x
    for idx, layer in enumerate(net.layers):
        if isinstance(layer, DenseLayer):
            if a.ndim != 2 or a.shape[1] != layer.w.shape[1]:
                raise ShapeMismatch(f"dense layer expects width {layer.w.shape[1]}, got {a.shape}", layer=idx)
            wm = layer.w * layer.mask
            z = a @ wm.T
            if layer.b is not None:
                z += layer.b
            records.append((layer, (a, wm)))
            a = z
        elif isinstance(layer, ConvLayer):
            if a.ndim != 4 or a.shape[1] != layer.w.shape[1]:
                raise ShapeMismatch(f"conv layer expects {layer.w.shape[1]} channels, got {a.shape}", layer=idx)
            wm = layer.w * layer.mask
            z = kernels.conv2d_forward(a, wm, layer.b, layer.padding)
            records.append((layer, (a, wm)))
            a = z
        elif isinstance(layer, ActivationLayer):
            if layer.fn == "relu":
                pos = a > 0
                records.append((layer, pos))
                a = a * pos
            else:
                y = np.tanh(a)
                records.append((layer, y))
                a = y
        elif isinstance(layer, MaxPoolLayer):
            h, w = a.shape[2], a.shape[3]
            a, am = kernels.maxpool2x2_forward(a)
            records.append((layer, (am, h, w)))
        else:  # flatten
            records.append((layer, a.shape))
            a = a.reshape(a.shape[0], -1)

    if a.ndim != 2:
        raise ShapeMismatch(f"head needs flat features, network produced shape {a.shape[1:]}")
    if isinstance(head, SoftmaxCrossEntropy):
        n_classes = a.shape[1]
        if labels.min() < 0 or labels.max() >= n_classes:
            raise ShapeMismatch(f"labels outside [0, {n_classes})")
        p, lse = _softmax_stats(a)
        loss = float(np.mean(lse[:, 0] - a[np.arange(a.shape[0]), labels]))
        head_cache = (p, labels)
    else:
        target = head.target if head.target is not None else 0.0
        r = a - target
        matrix = head.matrix
        ar = r if matrix is None else r @ matrix.T
        loss = float(0.5 * np.mean(np.sum(r * ar, axis=1)))
        head_cache = (r, matrix)
    return loss, ComputationTape(net, head, records, head_cache, loss)


def _head_adjoint(tape):
    if isinstance(tape.head, SoftmaxCrossEntropy):
        p, labels = tape.head_cache
        dz = p.copy()
        dz[np.arange(dz.shape[0]), labels] -= 1.0
        dz /= dz.shape[0]
    else:
        r, matrix = tape.head_cache
        dz = r if matrix is None else r @ matrix.T
        dz = dz / dz.shape[0]
    return dz


def _assemble(net, per_layer):
    parts = []
    for layer, _, b_sl in param_layout(net):
        dw, db = per_layer[id(layer)]
        parts.append(dw.ravel())
        if b_sl is not None:
            parts.append(db.ravel())
    return np.concatenate(parts)


def backward(tape, dense=False):
    """Gradient of the recorded loss w.r.t. the flat parameter vector.

    Entries at masked-out weight positions are forced to zero unless
    `dense=True`, which returns the raw gradient (what a dense layer would
    receive at every position) as needed by gradient-based growth criteria.
    A tape can be consumed only once.
    """
    if tape.consumed:
        raise TapeConsumed("this tape has already been differentiated")
    tape.consumed = True
    masked, raw = _walk_backward(tape)
    return raw if dense else masked


def _walk_backward(tape):
    net = tape.net
    grads = {}
    da = _head_adjoint(tape)
    for layer, cache in reversed(tape.records):
        if isinstance(layer, DenseLayer):
            a, wm = cache
            dw_raw = da.T @ a
            db = da.sum(axis=0) if layer.b is not None else None
            grads[id(layer)] = (dw_raw, db)
            da = da @ wm
        elif isinstance(layer, ConvLayer):
            a, wm = cache
            kh, kw = layer.w.shape[2], layer.w.shape[3]
            dw_raw = kernels.conv2d_backward_weight(a, da, kh, kw, layer.padding)
            db = da.sum(axis=(0, 2, 3)) if layer.b is not None else None
            grads[id(layer)] = (dw_raw, db)
            da = kernels.conv2d_backward_input(da, wm, a.shape[2], a.shape[3], layer.padding)
        elif isinstance(layer, ActivationLayer):
            if layer.fn == "relu":
                da = da * cache
            else:
                da = da * (1.0 - cache * cache)
        elif isinstance(layer, MaxPoolLayer):
            am, h, w = cache
            da = kernels.maxpool2x2_backward(da, am, h, w)
        else:
            da = da.reshape(cache)
    raw = _assemble(net, grads)
    masked = np.where(active_bool(net), raw, 0.0)
    return masked, raw


def loss_and_grads(net, batch, labels=None, head=None, dense=False):
    """Convenience single pass; returns (loss, grad) or (loss, grad, raw_grad)."""
    loss, tape = forward(net, batch, labels, head)
    tape.consumed = True
    masked, raw = _walk_backward(tape)
    if dense:
        return loss, masked, raw
    return loss, masked


# ---------------------------------------------------------------------------
# Hessian-vector products


def hvp(net, batch, labels, v, head=None):
    """Exact H v over active coordinates (unmasked weights plus biases).

    `v` lives in the active coordinate space, ordered as the flat layout
    restricted to active entries; masked-out rows and columns are absent.
    """
    head = head if head is not None else SoftmaxCrossEntropy()
    x, labels = _check_batch(net, batch, labels, head)
    idx = active_indices(net)
    v = np.asarray(v, dtype=float)
    if v.shape != idx.shape:
        raise ShapeMismatch(f"direction has length {v.size}, active dimension is {idx.size}")
    full_v = embed_active(net, v, idx)

    direction = {}
    for layer, w_sl, b_sl in param_layout(net):
        vw = full_v[w_sl].reshape(layer.w.shape)
        vb = full_v[b_sl] if b_sl is not None else None
        direction[id(layer)] = (vw, vb)

    # forward pass carrying (value, directional derivative)
    a, ra = x, np.zeros_like(x)
    records = []
    for layer in net.layers:
        if isinstance(layer, DenseLayer):
            wm = layer.w * layer.mask
            vw, vb = direction[id(layer)]
            z = a @ wm.T
            rz = ra @ wm.T + a @ vw.T
            if layer.b is not None:
                z = z + layer.b
                rz = rz + vb
            records.append((layer, (a, ra, wm, vw)))
            a, ra = z, rz
        elif isinstance(layer, ConvLayer):
            wm = layer.w * layer.mask
            vw, vb = direction[id(layer)]
            z = kernels.conv2d_forward(a, wm, layer.b, layer.padding)
            rz = kernels.conv2d_forward(ra, wm, None, layer.padding)
            rz += kernels.conv2d_forward(a, vw, None, layer.padding)
            if layer.b is not None:
                rz += vb[None, :, None, None]
            records.append((layer, (a, ra, wm, vw)))
            a, ra = z, rz
        elif isinstance(layer, ActivationLayer):
            if layer.fn == "relu":
                pos = a > 0
                records.append((layer, (pos, None, None)))
                a, ra = a * pos, ra * pos
            else:
                y = np.tanh(a)
                records.append((layer, (y, ra.copy(), None)))
                a, ra = y, (1.0 - y * y) * ra
        elif isinstance(layer, MaxPoolLayer):
            h, w = a.shape[2], a.shape[3]
            a, am = kernels.maxpool2x2_forward(a)
            win = ra.reshape(ra.shape[0], ra.shape[1], h // 2, 2, w // 2, 2)
            win = win.transpose(0, 1, 2, 4, 3, 5).reshape(*a.shape, 4)
            ra = np.take_along_axis(win, am[..., None].astype(np.intp), axis=-1)[..., 0]
            records.append((layer, (am, h, w)))
        else:
            records.append((layer, a.shape))
            a = a.reshape(a.shape[0], -1)
            ra = ra.reshape(ra.shape[0], -1)

    if a.ndim != 2:
        raise ShapeMismatch(f"head needs flat features, network produced shape {a.shape[1:]}")
    b = a.shape[0]
    if isinstance(head, SoftmaxCrossEntropy):
        p, _ = _softmax_stats(a)
        da = p.copy()
        da[np.arange(b), labels] -= 1.0
        da /= b
        rp = p * (ra - np.sum(p * ra, axis=1, keepdims=True))
        rda = rp / b
    else:
        target = head.target if head.target is not None else 0.0
        r = a - target
        matrix = head.matrix
        da = (r if matrix is None else r @ matrix.T) / b
        rda = (ra if matrix is None else ra @ matrix.T) / b

    # backward pass carrying (adjoint, directional derivative of the adjoint)
    hv = {}
    for layer, cache in reversed(records):
        if isinstance(layer, DenseLayer):
            a_in, ra_in, wm, vw = cache
            rdw = rda.T @ a_in + da.T @ ra_in
            rdb = rda.sum(axis=0) if layer.b is not None else None
            hv[id(layer)] = (rdw, rdb)
            da, rda = da @ wm, rda @ wm + da @ vw
        elif isinstance(layer, ConvLayer):
            a_in, ra_in, wm, vw = cache
            kh, kw = layer.w.shape[2], layer.w.shape[3]
            rdw = kernels.conv2d_backward_weight(a_in, rda, kh, kw, layer.padding)
            rdw += kernels.conv2d_backward_weight(ra_in, da, kh, kw, layer.padding)
            rdb = rda.sum(axis=(0, 2, 3)) if layer.b is not None else None
            hv[id(layer)] = (rdw, rdb)
            h_in, w_in = a_in.shape[2], a_in.shape[3]
            new_da = kernels.conv2d_backward_input(da, wm, h_in, w_in, layer.padding)
            rda = kernels.conv2d_backward_input(rda, wm, h_in, w_in, layer.padding) + kernels.conv2d_backward_input(da, vw, h_in, w_in, layer.padding)
            da = new_da
        elif isinstance(layer, ActivationLayer):
            if layer.fn == "relu":
                pos, _, _ = cache
                da, rda = da * pos, rda * pos
            else:
                y, rz, _ = cache
                phi1 = 1.0 - y * y
                phi2_rz = -2.0 * y * phi1 * rz
                new_da = da * phi1
                rda = rda * phi1 + da * phi2_rz
                da = new_da
        elif isinstance(layer, MaxPoolLayer):
            am, h, w = cache
            da = kernels.maxpool2x2_backward(da, am, h, w)
            rda = kernels.maxpool2x2_backward(rda, am, h, w)
        else:
            da = da.reshape(cache)
            rda = rda.reshape(cache)

    full = _assemble(net, hv)
    return full[idx]


# ---------------------------------------------------------------------------
# inference helpers


def logits(net, batch):
    """Pre-softmax network output; no tape is recorded."""
    x = np.asarray(batch, dtype=float)
    if x.shape[1:] != net.input_shape:
        raise ShapeMismatch(f"batch item shape {x.shape[1:]} does not match network input {net.input_shape}", layer=0)
    a = x
    for layer in net.layers:
        if isinstance(layer, DenseLayer):
            a = a @ (layer.w * layer.mask).T
            if layer.b is not None:
                a = a + layer.b
        elif isinstance(layer, ConvLayer):
            a = kernels.conv2d_forward(a, layer.w * layer.mask, layer.b, layer.padding)
        elif isinstance(layer, ActivationLayer):
            a = np.maximum(a, 0.0) if layer.fn == "relu" else np.tanh(a)
        elif isinstance(layer, MaxPoolLayer):
            a, _ = kernels.maxpool2x2_forward(a)
        else:
            a = a.reshape(a.shape[0], -1)
    return a


def predict_proba(net, batch, chunk=512):
    """Softmax probabilities, computed in chunks."""
    outs = []
    for start in range(0, batch.shape[0], chunk):
        z = logits(net, batch[start:start + chunk])
        p, _ = _softmax_stats(z)
        outs.append(p)
    return np.concatenate(outs, axis=0)


def evaluate(net, x, y, chunk=512):
    """(mean cross-entropy loss, accuracy) over a dataset split."""
    total_loss = 0.0
    correct = 0
    n = x.shape[0]
    for start in range(0, n, chunk):
        xb, yb = x[start:start + chunk], y[start:start + chunk]
        z = logits(net, xb)
        p, lse = _softmax_stats(z)
        total_loss += float(np.sum(lse[:, 0] - z[np.arange(z.shape[0]), yb]))
        correct += int(np.sum(z.argmax(axis=1) == yb))
    return total_loss / n, correct / n
