"""Minimal reverse-mode differentiation over a closed primitive set.

The engine records primitive applications on an append-only tape and replays
them in exact reverse order, so gradients are bit-deterministic.  Complex
tensors appear only inside the spectral primitives; their cotangents follow
the (dL/dRe + i dL/dIm) convention, which makes the FFT adjoints below exact.

FFT convention: unnormalized forward transform, 1/N inverse.
"""
from __future__ import annotations

import math
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import erf


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NonScalarLoss(AutodiffError):
    pass


class UnsupportedPrimitive(AutodiffError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape", "nid", "_needs")

    def __init__(self, data, tape, nid, requires_grad=False, needs=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape
        self.nid = nid
        self._needs = requires_grad if needs is None else needs

    @property
    def shape(self):
        return self.data.shape


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self._nodes = []
        self._leaves: List[Tensor] = []
        self._next_id = 0

    def leaf(self, data, requires_grad=False) -> Tensor:
        t = Tensor(np.asarray(data), self, self._next_id, requires_grad)
        self._next_id += 1
        self._leaves.append(t)
        return t

    def _emit(self, data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        needs = any(t._needs for t in inputs)
        out = Tensor(data, self, self._next_id, needs=needs)
        self._next_id += 1
        if needs:
            self._nodes.append((out, tuple(inputs), backward))
        return out

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients into every requires-grad leaf."""
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
        grads = {loss.nid: np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self._nodes):
            g = grads.pop(out.nid, None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward(g)):
                if gi is None or not t._needs:
                    continue
                if t.nid in grads:
                    grads[t.nid] = grads[t.nid] + gi
                else:
                    grads[t.nid] = gi
        for leaf in self._leaves:
            if leaf.requires_grad:
                g = grads.get(leaf.nid)
                leaf.grad = np.zeros_like(leaf.data) if g is None else g


def _same_tape(*tensors) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise AutodiffError("tensors belong to different tapes")
    return tape


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    """Reverse numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    return tape._emit(
        a.data + b.data, (a, b),
        lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    return tape._emit(
        a.data - b.data, (a, b),
        lambda g: (_sum_to(g, a.shape), _sum_to(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    return tape._emit(
        a.data * b.data, (a, b),
        lambda g: (_sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)),
    )


def smul(a: Tensor, s: float) -> Tensor:
    return a.tape._emit(a.data * s, (a,), lambda g: (g * s,))


def const_mul(a: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant (possibly complex) array."""
    c = np.asarray(c)
    return a.tape._emit(
        a.data * c, (a,), lambda g: (_sum_to(g * np.conj(c), a.shape),)
    )


def const_add(a: Tensor, c) -> Tensor:
    return a.tape._emit(a.data + c, (a,), lambda g: (_sum_to(g, a.shape),))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Channel-axis matmul: x[..., i] @ w[i, o] (+ b[o])."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatch(
            f"linear: {x.data.shape[-1]} input channels vs weight {w.data.shape}"
        )
    tape = _same_tape(x, w, *( (b,) if b is not None else () ))
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def backward(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, w.data.shape[0]).T @ g.reshape(-1, w.data.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, _sum_to(g, b.shape)

    inputs = (x, w) if b is None else (x, w, b)
    return tape._emit(y, inputs, backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return add(x, b)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = np.exp(-0.5 * x.data**2) * _INV_SQRT2PI
    return x.tape._emit(
        x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),)
    )


def layernorm(x: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean, unit variance over `axes` (no affine)."""
    if eps <= 0:
        raise AutodiffError("layernorm eps must be positive")
    axes = tuple(axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc**2, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = np.mean(g * y, axis=axes, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return x.tape._emit(y, (x,), backward)


def rfftn(x: Tensor, axes) -> Tensor:
    """Real-to-complex FFT over the given axes (unnormalized)."""
    axes = tuple(axes)
    sizes = tuple(x.data.shape[a] for a in axes)
    if sizes[-1] % 2:
        raise UnsupportedPrimitive("rfftn requires an even last transform axis")
    n_total = int(np.prod(sizes))
    y = np.fft.rfftn(x.data, axes=axes)
    if x.data.dtype == np.float32:
        y = y.astype(np.complex64)
    last = axes[-1]

    def backward(g):
        d = np.array(g)
        sl = [slice(None)] * d.ndim
        sl[last] = slice(1, -1)
        d[tuple(sl)] *= 0.5
        gx = np.fft.irfftn(d, s=sizes, axes=axes) * n_total
        return (gx.astype(x.data.dtype),)

    return x.tape._emit(y, (x,), backward)


def irfftn(y: Tensor, axes, s) -> Tensor:
    """Complex-to-real inverse FFT over the given axes (1/N normalized)."""
    axes = tuple(axes)
    s = tuple(s)
    n_total = int(np.prod(s))
    x = np.fft.irfftn(y.data, s=s, axes=axes)
    if y.data.dtype == np.complex64:
        x = x.astype(np.float32)
    last = axes[-1]

    def backward(g):
        gy = np.fft.rfftn(g, axes=axes)
        sl = [slice(None)] * gy.ndim
        sl[last] = slice(1, -1)
        gy[tuple(sl)] *= 2.0
        return ((gy / n_total).astype(y.data.dtype),)

    return y.tape._emit(x, (y,), backward)


def mode_mix(xhat: Tensor, w: Tensor, modes) -> Tensor:
    """Complex mode-truncated channel linear (spectral convolution kernel).

    1D: xhat (B, K, Cin), w (Cin, Cout, m).  2D: xhat (B, K1, K2, Cin),
    w (Cin, Cout, 2*m1, m2) covering the low-|k| corner rows.  Modes outside
    the retained set map to zero.
    """
    tape = _same_tape(xhat, w)
    rank = len(modes)
    if rank == 1:
        (m,) = modes
        K = xhat.data.shape[1]
        if m > K:
            raise ShapeMismatch(f"mode_mix: {m} modes > spectrum size {K}")
        out_c = w.data.shape[1]
        y = np.zeros(xhat.data.shape[:-1] + (out_c,), dtype=xhat.data.dtype)
        y[:, :m] = np.einsum("bki,iok->bko", xhat.data[:, :m], w.data)

        def backward(g):
            gc = g[:, :m]
            gx = np.zeros_like(xhat.data)
            gx[:, :m] = np.einsum("bko,iok->bki", gc, np.conj(w.data))
            gw = np.einsum("bki,bko->iok", np.conj(xhat.data[:, :m]), gc)
            return gx, gw.astype(w.data.dtype)

        return tape._emit(y, (xhat, w), backward)

    m1, m2 = modes
    _, K1, K2, _ = xhat.data.shape
    if m2 > K2 or 2 * m1 > K1:
        raise ShapeMismatch(f"mode_mix: modes {modes} exceed spectrum ({K1},{K2})")
    out_c = w.data.shape[1]
    w_lo, w_hi = w.data[:, :, :m1], w.data[:, :, m1:]
    y = np.zeros(xhat.data.shape[:-1] + (out_c,), dtype=xhat.data.dtype)
    y[:, :m1, :m2] = np.einsum("bxyi,ioxy->bxyo", xhat.data[:, :m1, :m2], w_lo)
    y[:, K1 - m1:, :m2] = np.einsum(
        "bxyi,ioxy->bxyo", xhat.data[:, K1 - m1:, :m2], w_hi
    )

    def backward(g):
        g_lo, g_hi = g[:, :m1, :m2], g[:, K1 - m1:, :m2]
        gx = np.zeros_like(xhat.data)
        gx[:, :m1, :m2] = np.einsum("bxyo,ioxy->bxyi", g_lo, np.conj(w_lo))
        gx[:, K1 - m1:, :m2] = np.einsum("bxyo,ioxy->bxyi", g_hi, np.conj(w_hi))
        gw = np.concatenate(
            [
                np.einsum("bxyi,bxyo->ioxy", np.conj(xhat.data[:, :m1, :m2]), g_lo),
                np.einsum(
                    "bxyi,bxyo->ioxy", np.conj(xhat.data[:, K1 - m1:, :m2]), g_hi
                ),
            ],
            axis=2,
        )
        return gx, gw.astype(w.data.dtype)

    return tape._emit(y, (xhat, w), backward)


def gate_mul(x: Tensor, gate: Tensor) -> Tensor:
    """Channel-broadcast gate multiply: x (B, *sp, C) times gate (B, C)."""
    tape = _same_tape(x, gate)
    n_spatial = x.data.ndim - 2
    gexp = gate.data.reshape(gate.data.shape[0], *([1] * n_spatial), -1)
    spatial_axes = tuple(range(1, 1 + n_spatial))

    def backward(g):
        return g * gexp, np.sum(g * x.data, axis=spatial_axes)

    return tape._emit(x.data * gexp, (x, gate), backward)


def gate_expand(c: Tensor, n: int, gamma: float) -> Tensor:
    """Block-repeat (B, m) gate inputs into (B, n); the tail is ones."""
    b, m = c.data.shape
    l = gate_block_length(n, m, gamma)
    idx = np.arange(m * l) // max(l, 1)
    out = np.ones((b, n), dtype=c.data.dtype)
    if l > 0:
        out[:, : m * l] = c.data[:, idx]

    def backward(g):
        gc = np.zeros_like(c.data)
        if l > 0:
            np.add.at(gc.T, idx, g[:, : m * l].T)
        return (gc,)

    return c.tape._emit(out, (c,), backward)


def gate_block_length(n: int, m: int, gamma: float) -> int:
    """l = floor((1 - gamma) * n / m); zero when the gate is skip-only."""
    if m == 0:
        return 0
    return int(math.floor((1.0 - gamma) * n / m))


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    shape = x.data.shape

    def backward(g):
        if axes is None:
            return (np.broadcast_to(g, shape).copy(),)
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._emit(x.data.sum(axis=axes), (x,), backward)


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    shape = x.data.shape
    count = x.data.size if axes is None else int(
        np.prod([shape[a] for a in np.atleast_1d(axes)])
    )

    def backward(g):
        if axes is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        g = np.expand_dims(g / count, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._emit(x.data.mean(axis=axes), (x,), backward)


def power(x: Tensor, k: float) -> Tensor:
    return x.tape._emit(
        x.data**k, (x,), lambda g: (g * k * x.data ** (k - 1),)
    )


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return x.tape._emit(y, (x,), lambda g: (g * 0.5 / y,))


def _perturbable(arr):
    """Coordinate list: (index, component) with component in {re, im}."""
    coords = []
    for idx in np.ndindex(arr.shape):
        coords.append((idx, "re"))
        if np.iscomplexobj(arr):
            coords.append((idx, "im"))
    return coords


def standard_primitive_checks(seed: int = 0, n_sample: int = 12) -> dict:
    """Gradient-check every primitive on random inputs; name -> worst error."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    rc = lambda *s: r(s) + 1j * r(s)
    c1 = rc(2, 9, 3)
    c2 = rc(2, 8, 5, 3)
    checks = {
        "add": (lambda a, b: reduce_sum(mul(add(a, b), add(a, b))), [r((3, 4)), r(4)]),
        "sub": (lambda a, b: reduce_sum(power(sub(a, b), 2)), [r((3, 4)), r((3, 4))]),
        "mul": (lambda a, b: reduce_sum(mul(a, b)), [r((3, 4)), r((3, 1))]),
        "scalar-mul": (lambda a: reduce_sum(power(smul(a, 1.7), 2)), [r((3, 4))]),
        "linear": (
            lambda x, w, b: reduce_sum(power(linear(x, w, b), 2)),
            [r((2, 5, 3)), r((3, 4)), r(4)],
        ),
        "bias-add": (lambda x, b: reduce_sum(power(bias_add(x, b), 2)), [r((2, 4)), r(4)]),
        "gelu": (lambda x: reduce_sum(gelu(x)), [r((3, 5))]),
        "layer-normalize": (
            lambda x: reduce_sum(power(layernorm(x, (1, 2)), 3)),
            [r((2, 4, 4))],
        ),
        "layer-normalize-flat": (
            lambda x: reduce_sum(power(layernorm(x, (1,), eps=1e-4), 2)),
            [1e-2 * r((2, 6)) + 5.0],
        ),
        "rfft-irfft-1d": (
            lambda x: reduce_sum(power(irfftn(const_mul(rfftn(x, (1,)), c1), (1,), (16,)), 2)),
            [r((2, 16, 3))],
        ),
        "rfft-irfft-2d": (
            lambda x: reduce_sum(power(irfftn(const_mul(rfftn(x, (1, 2)), c2), (1, 2), (8, 8)), 2)),
            [r((2, 8, 8, 3))],
        ),
        "mode-mix-1d": (
            lambda x, w: reduce_sum(
                power(irfftn(mode_mix(rfftn(x, (1,)), w, (4,)), (1,), (16,)), 2)
            ),
            [r((2, 16, 3)), rc(3, 2, 4)],
        ),
        "mode-mix-2d": (
            lambda x, w: reduce_sum(
                power(irfftn(mode_mix(rfftn(x, (1, 2)), w, (3, 3)), (1, 2), (8, 8)), 2)
            ),
            [r((2, 8, 8, 3)), rc(3, 2, 6, 3)],
        ),
        "gate-multiply": (
            lambda x, g: reduce_sum(power(gate_mul(x, g), 2)),
            [r((2, 6, 5)), r((2, 5))],
        ),
        "gate-expand": (
            lambda c: reduce_sum(power(gate_expand(c, 8, 0.25), 2)),
            [r((2, 2))],
        ),
        "sum": (lambda x: reduce_sum(power(reduce_sum(x, (1,)), 2)), [r((3, 4, 2))]),
        "mean": (lambda x: reduce_sum(power(reduce_mean(x, (1, 2)), 3)), [r((3, 4, 2))]),
        "power": (lambda x: reduce_sum(power(x, 3)), [r((3, 4)) + 3.0]),
        "sqrt": (lambda x: reduce_sum(sqrt(x)), [np.abs(r((3, 4))) + 1.0]),
    }
    return {
        name: grad_check(f, arrays, n_sample=n_sample, seed=seed)
        for name, (f, arrays) in checks.items()
    }


def grad_check(f: Callable, arrays, step: float = 1e-5, n_sample: int = 32,
               seed: int = 0) -> float:
    """Compare reverse-mode gradients of f against central differences.

    `f` takes one leaf Tensor per input array and returns a scalar loss
    Tensor.  A random subsample of coordinates is perturbed; the return value
    is the worst absolute deviation normalized by the largest gradient
    magnitude (floored at 1).
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-7, 1e-3]")
    arrays = [np.asarray(a, dtype=np.complex128 if np.iscomplexobj(a) else np.float64)
              for a in arrays]
    tape = Tape()
    leaves = [tape.leaf(a.copy(), requires_grad=True) for a in arrays]
    tape.backward(f(*leaves))
    grads = [leaf.grad for leaf in leaves]
    gmax = max(1.0, max(float(np.max(np.abs(g))) for g in grads))

    def eval_loss(mods):
        t = Tape()
        ls = []
        for i, a in enumerate(arrays):
            a = a.copy()
            for j, idx, comp, delta in mods:
                if j == i:
                    a[idx] += delta if comp == "re" else 1j * delta
            ls.append(t.leaf(a, requires_grad=False))
        return float(np.real(f(*ls).data))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, arr in enumerate(arrays):
        coords = _perturbable(arr)
        if n_sample is not None and len(coords) > n_sample:
            picks = rng.choice(len(coords), size=n_sample, replace=False)
            coords = [coords[p] for p in picks]
        for idx, comp in coords:
            lp = eval_loss([(i, idx, comp, step)])
            lm = eval_loss([(i, idx, comp, -step)])
            fd = (lp - lm) / (2 * step)
            g = grads[i][idx]
            ad = float(np.real(g)) if comp == "re" else float(np.imag(g))
            worst = max(worst, abs(ad - fd))
    return worst / gmax
