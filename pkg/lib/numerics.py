"""
Dense tensor kernels, a direct real DFT and reverse-mode differentiation.

Every kernel accepts plain numpy arrays or Vars. Called on arrays it is a pure
function returning an array; called with at least one Var it records itself on
that Var's Tape and returns a Var. All values are float64.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from lib.errors import NumericsError

logger = logging.getLogger(__name__)

FREQ_MODES = ("realimag", "magnitude")


class Var:
    """A value produced on (or registered with) a Tape."""

    __slots__ = ("data", "tape", "uid", "name", "requires_grad")

    def __init__(self, data: np.ndarray, tape: "Tape", uid: int, name: Optional[str] = None,
                 requires_grad: bool = False):
        self.data = data
        self.tape = tape
        self.uid = uid
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = self.name or f"v{self.uid}"
        return f"<Var {label} shape={self.data.shape}>"


@dataclass
class _Record:
    kernel: str
    inputs: Tuple[Var, ...]
    output: Var
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of executed kernels for one forward pass.

    A tape is single-threaded and used for exactly one backward pass.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self.parameters: Dict[str, Var] = {}
        self.kinks: List[np.ndarray] = []
        self._next_uid = 0
        self._known = set()

    def _new_var(self, data: np.ndarray, requires_grad: bool, name: Optional[str] = None) -> Var:
        var = Var(data, self, self._next_uid, name=name, requires_grad=requires_grad)
        self._next_uid += 1
        self._known.add(var.uid)
        return var

    def parameter(self, name: str, array: np.ndarray) -> Var:
        """Register a learnable array; its gradient is returned by backward()."""
        if name in self.parameters:
            raise NumericsError(f"parameter '{name}' registered twice")
        data = np.array(array, dtype=np.float64)
        check_finite(data, f"parameter {name}")
        var = self._new_var(data, requires_grad=True, name=name)
        self.parameters[name] = var
        return var

    def constant(self, array) -> Var:
        return self._new_var(np.asarray(array, dtype=np.float64), requires_grad=False)

    def record(self, kernel: str, inputs: Tuple[Var, ...], data: np.ndarray,
               backward: Callable, kink: Optional[np.ndarray] = None) -> Var:
        if kink is not None:
            self.kinks.append(np.array(kink, dtype=np.float64).ravel())
        requires_grad = any(v.requires_grad for v in inputs)
        out = self._new_var(data, requires_grad)
        self.records.append(_Record(kernel, inputs, out, backward))
        return out

    def kink_signature(self) -> np.ndarray:
        """Sign pattern of every ReLU / absolute-value input seen so far."""
        if not self.kinks:
            return np.zeros(0, dtype=bool)
        return np.concatenate([k > 0.0 for k in self.kinks])

    def backward(self, loss: Var) -> Dict[str, np.ndarray]:
        """
        Reverse-mode pass from a scalar loss.

        Args:
            loss: Scalar Var produced by kernels recorded on this tape

        Returns:
            Gradient for every registered parameter, keyed by parameter name
        """
        if not isinstance(loss, Var) or loss.tape is not self or loss.uid not in self._known:
            raise NumericsError("loss is not on this tape")
        if loss.data.size != 1:
            raise NumericsError(f"loss must be a scalar, got shape {loss.data.shape}")

        grads: Dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.output.uid, None)
            if g is None:
                continue
            for var, g_in in zip(rec.inputs, rec.backward(g)):
                if g_in is None or not var.requires_grad:
                    continue
                if g_in.shape != var.data.shape:
                    raise NumericsError(
                        f"{rec.kernel}: gradient shape {g_in.shape} vs value shape {var.data.shape}"
                    )
                if var.uid in grads:
                    grads[var.uid] = grads[var.uid] + g_in
                else:
                    grads[var.uid] = g_in

        return {
            name: grads.get(var.uid, np.zeros_like(var.data))
            for name, var in self.parameters.items()
        }


Operand = Union[np.ndarray, Var, float]


def check_finite(array: np.ndarray, context: str) -> None:
    """Raise NumericsError if any entry is NaN or infinite."""
    if not np.all(np.isfinite(array)):
        raise NumericsError(f"{context}: non-finite values")


def _shape_error(kernel: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> NumericsError:
    return NumericsError(f"{kernel}: shape mismatch {tuple(a)} vs {tuple(b)}")


def _bind(*items: Operand) -> Tuple[Optional[Tape], List[np.ndarray]]:
    tape = None
    arrays = []
    for item in items:
        if isinstance(item, Var):
            if tape is None:
                tape = item.tape
            elif item.tape is not tape:
                raise NumericsError("operands recorded on different tapes")
            arrays.append(item.data)
        else:
            arrays.append(np.asarray(item, dtype=np.float64))
    return tape, arrays


def _finish(tape: Optional[Tape], kernel: str, inputs: Sequence[Operand], out: np.ndarray,
            backward: Callable, kink: Optional[np.ndarray] = None):
    check_finite(out, kernel)
    if tape is None:
        return out
    vars_in = tuple(i if isinstance(i, Var) else tape.constant(i) for i in inputs)
    return tape.record(kernel, vars_in, out, backward, kink)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def value(x: Operand) -> np.ndarray:
    """Raw array behind an operand."""
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# Elementwise and structural kernels
# --------------------------------------------------------------------------

def _broadcast_into(kernel: str, x: np.ndarray, y: np.ndarray) -> None:
    try:
        result = np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise _shape_error(kernel, x.shape, y.shape)
    if result != x.shape:
        raise _shape_error(kernel, x.shape, y.shape)


def add(a: Operand, b: Operand):
    """a + b, where b has a's shape or broadcasts into it."""
    tape, (x, y) = _bind(a, b)
    _broadcast_into("add", x, y)

    def backward(g):
        return g, _unbroadcast(g, y.shape)

    return _finish(tape, "add", (a, b), x + y, backward)


def mul(a: Operand, b: Operand):
    """Elementwise a * b, where b has a's shape or broadcasts into it."""
    tape, (x, y) = _bind(a, b)
    _broadcast_into("mul", x, y)

    def backward(g):
        return g * y, _unbroadcast(g * x, y.shape)

    return _finish(tape, "mul", (a, b), x * y, backward)


def affine(a: Operand, scale, shift):
    """a * scale + shift with constant scale and shift."""
    tape, (x,) = _bind(a)
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    _broadcast_into("affine", x, scale)
    _broadcast_into("affine", x, shift)

    def backward(g):
        return (g * scale,)

    return _finish(tape, "affine", (a,), x * scale + shift, backward)


def matmul(a: Operand, b: Operand):
    """Matrix product over the last two axes; leading axes broadcast."""
    tape, (x, y) = _bind(a, b)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise _shape_error("matmul", x.shape, y.shape)
    try:
        out = np.matmul(x, y)
    except ValueError:
        raise _shape_error("matmul", x.shape, y.shape)

    def backward(g):
        gx = np.matmul(g, np.swapaxes(y, -1, -2))
        gy = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _finish(tape, "matmul", (a, b), out, backward)


def transpose(a: Operand, axes: Optional[Sequence[int]] = None):
    """Permute axes; the default swaps the last two."""
    tape, (x,) = _bind(a)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise NumericsError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _finish(tape, "transpose", (a,), np.transpose(x, axes).copy(), backward)


def reshape(a: Operand, shape: Sequence[int]):
    tape, (x,) = _bind(a)
    try:
        out = x.reshape(tuple(shape))
    except ValueError:
        raise _shape_error("reshape", x.shape, tuple(shape))

    def backward(g):
        return (g.reshape(x.shape),)

    return _finish(tape, "reshape", (a,), out.copy(), backward)


def broadcast_to(a: Operand, shape: Sequence[int]):
    """Repeat a along new leading axes or size-1 axes."""
    tape, (x,) = _bind(a)
    try:
        out = np.broadcast_to(x, tuple(shape)).copy()
    except ValueError:
        raise _shape_error("broadcast_to", x.shape, tuple(shape))

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _finish(tape, "broadcast_to", (a,), out, backward)


def concat(ts: Sequence[Operand], axis: int = 0):
    tape, arrays = _bind(*ts)
    if not arrays:
        raise NumericsError("concat: no operands")
    ax = axis % arrays[0].ndim
    for arr in arrays[1:]:
        if arr.ndim != arrays[0].ndim or any(
            arr.shape[i] != arrays[0].shape[i] for i in range(arr.ndim) if i != ax
        ):
            raise _shape_error("concat", arrays[0].shape, arr.shape)
    sizes = [arr.shape[ax] for arr in arrays]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _finish(tape, "concat", tuple(ts), np.concatenate(arrays, axis=ax), backward)


def take_rows(table: Operand, index):
    """Embedding lookup: rows of a 2-D table selected by an integer index array."""
    tape, (tab,) = _bind(table)
    idx = np.asarray(index, dtype=np.int64)
    if tab.ndim != 2:
        raise NumericsError(f"take_rows: table must be 2-D, got {tab.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= tab.shape[0]):
        raise NumericsError(f"take_rows: index out of range for table of {tab.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(tab)
        np.add.at(gt, idx, g)
        return (gt,)

    return _finish(tape, "take_rows", (table,), tab[idx].copy(), backward)


def relu(a: Operand):
    """max(x, 0); the derivative at exactly 0 is 0."""
    tape, (x,) = _bind(a)

    def backward(g):
        return (g * (x > 0.0),)

    return _finish(tape, "relu", (a,), np.maximum(x, 0.0), backward, kink=x)


def sigmoid(a: Operand):
    tape, (x,) = _bind(a)
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _finish(tape, "sigmoid", (a,), out, backward)


def tanh(a: Operand):
    tape, (x,) = _bind(a)
    out = np.tanh(x)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _finish(tape, "tanh", (a,), out, backward)


def softmax_rows(a: Operand):
    """Softmax over the last axis, stabilised by row-max subtraction."""
    tape, (x,) = _bind(a)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _finish(tape, "softmax_rows", (a,), out, backward)


def reduce_sum(a: Operand):
    tape, (x,) = _bind(a)

    def backward(g):
        return (np.full_like(x, float(np.asarray(g).reshape(()))),)

    return _finish(tape, "reduce_sum", (a,), np.asarray(x.sum()), backward)


def masked_abs_mean(pred: Operand, target: np.ndarray):
    """
    Mean of |pred - target| over entries whose target is nonzero.

    Returns 0 (with zero gradient) when every entry is masked.
    """
    tape, (p,) = _bind(pred)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise _shape_error("masked_abs_mean", p.shape, t.shape)
    mask = t != 0.0
    count = int(mask.sum())
    diff = p - t
    out = np.asarray(np.abs(diff[mask]).sum() / count if count else 0.0)

    def backward(g):
        if not count:
            return (np.zeros_like(p),)
        scale = float(np.asarray(g).reshape(())) / count
        return (np.sign(diff) * mask * scale,)

    return _finish(tape, "masked_abs_mean", (pred,), out, backward, kink=diff[mask])


# --------------------------------------------------------------------------
# Convolutions and graph propagation
# --------------------------------------------------------------------------

def conv1x1(x: Operand, w: Operand, b: Optional[Operand] = None, axis: int = 0):
    """
    Pointwise (1x1) convolution mixing the channels on `axis`.

    Args:
        x: Input, e.g. [C_in, N] (axis=0) or [B, C_in, N, T] (axis=1)
        w: Weights [C_out, C_in]
        b: Optional bias [C_out]
        axis: Channel axis of x

    Returns:
        Output with the channel axis resized to C_out
    """
    operands = (x, w) if b is None else (x, w, b)
    tape, arrays = _bind(*operands)
    xv, wv = arrays[0], arrays[1]
    ax = axis % xv.ndim
    if wv.ndim != 2 or wv.shape[1] != xv.shape[ax]:
        raise _shape_error("conv1x1", xv.shape, wv.shape)
    bv = arrays[2] if b is not None else None
    if bv is not None and bv.shape != (wv.shape[0],):
        raise _shape_error("conv1x1", wv.shape, bv.shape)

    xm = np.moveaxis(xv, ax, 0)
    out_m = np.tensordot(wv, xm, axes=([1], [0]))
    if bv is not None:
        out_m = out_m + bv.reshape((-1,) + (1,) * (xm.ndim - 1))
    out = np.ascontiguousarray(np.moveaxis(out_m, 0, ax))

    def backward(g):
        gm = np.moveaxis(g, ax, 0)
        rest = tuple(range(1, gm.ndim))
        gw = np.tensordot(gm, xm, axes=(rest, rest))
        gx = np.moveaxis(np.tensordot(wv, gm, axes=([0], [0])), 0, ax)
        if bv is None:
            return gx, gw
        return gx, gw, gm.sum(axis=rest)

    return _finish(tape, "conv1x1", operands, out, backward)


def dilated_causal_conv(x: Operand, w: Operand, b: Optional[Operand] = None, dilation: int = 1,
                        channel_axis: int = 0):
    """
    Dilated causal convolution over the last (time) axis, no padding.

    Output position t combines inputs t, t+d, ..., t+d*(k-1), so it never sees
    an input later than t + d*(k-1): the output is aligned to its newest input.

    Args:
        x: Input, e.g. [C, T] or [B, C, N, T]
        w: Weights [C_out, C, k]
        b: Optional bias [C_out]
        dilation: Spacing d >= 1 between kernel taps
        channel_axis: Channel axis of x (must not be the time axis)

    Returns:
        Output with time extent T - d*(k-1)
    """
    if dilation < 1:
        raise NumericsError(f"dilated_causal_conv: dilation must be >= 1, got {dilation}")
    operands = (x, w) if b is None else (x, w, b)
    tape, arrays = _bind(*operands)
    xv, wv = arrays[0], arrays[1]
    ax = channel_axis % xv.ndim
    if ax == xv.ndim - 1:
        raise NumericsError("dilated_causal_conv: channel axis cannot be the time axis")
    if wv.ndim != 3 or wv.shape[1] != xv.shape[ax]:
        raise _shape_error("dilated_causal_conv", xv.shape, wv.shape)
    bv = arrays[2] if b is not None else None
    if bv is not None and bv.shape != (wv.shape[0],):
        raise _shape_error("dilated_causal_conv", wv.shape, bv.shape)

    k = wv.shape[2]
    length = xv.shape[-1]
    span = dilation * (k - 1)
    t_out = length - span
    if t_out < 1:
        raise NumericsError(
            f"dilated_causal_conv: window of length {length} shorter than receptive field {span + 1}"
        )

    xm = np.moveaxis(xv, ax, 0)
    taps = [slice(j * dilation, j * dilation + t_out) for j in range(k)]
    out_m = sum(np.tensordot(wv[:, :, j], xm[..., taps[j]], axes=([1], [0])) for j in range(k))
    if bv is not None:
        out_m = out_m + bv.reshape((-1,) + (1,) * (xm.ndim - 1))
    out = np.ascontiguousarray(np.moveaxis(out_m, 0, ax))

    def backward(g):
        gm = np.moveaxis(g, ax, 0)
        rest = tuple(range(1, gm.ndim))
        gw = np.zeros_like(wv)
        gxm = np.zeros_like(xm)
        for j in range(k):
            gw[:, :, j] = np.tensordot(gm, xm[..., taps[j]], axes=(rest, rest))
            gxm[..., taps[j]] += np.tensordot(wv[:, :, j], gm, axes=([0], [0]))
        gx = np.moveaxis(gxm, 0, ax)
        if bv is None:
            return gx, gw
        return gx, gw, gm.sum(axis=rest)

    return _finish(tape, "dilated_causal_conv", operands, out, backward)


def pad_left(a: Operand, count: int):
    """Prepend `count` zeros on the time (last) axis."""
    tape, (x,) = _bind(a)
    if count <= 0:
        return a
    pad = [(0, 0)] * (x.ndim - 1) + [(count, 0)]

    def backward(g):
        return (g[..., count:],)

    return _finish(tape, "pad_left", (a,), np.pad(x, pad), backward)


def time_slice(a: Operand, start: int, stop: Optional[int] = None):
    """x[..., start:stop] on the time (last) axis."""
    tape, (x,) = _bind(a)
    window = slice(start, stop)
    out = x[..., window].copy()
    if out.shape[-1] == 0:
        raise NumericsError(f"time_slice: empty slice [{start}:{stop}] of length {x.shape[-1]}")

    def backward(g):
        gx = np.zeros_like(x)
        gx[..., window] = g
        return (gx,)

    return _finish(tape, "time_slice", (a,), out, backward)


def propagate(a: Operand, x: Operand):
    """
    Apply a transition matrix along the node axis: out[b,c,v,t] = sum_w A[v,w] x[b,c,w,t].

    Args:
        a: [N, N] shared or [B, N, N] per-sample adjacency
        x: [B, C, N, T] features
    """
    tape, (av, xv) = _bind(a, x)
    if xv.ndim != 4 or av.shape[-1] != xv.shape[2] or av.shape[-2] != xv.shape[2]:
        raise _shape_error("propagate", av.shape, xv.shape)
    if av.ndim == 2:
        out = av @ xv

        def backward(g):
            return np.tensordot(g, xv, axes=([0, 1, 3], [0, 1, 3])), av.T @ g
    elif av.ndim == 3 and av.shape[0] == xv.shape[0]:
        out = av[:, None] @ xv

        def backward(g):
            return np.sum(g @ np.swapaxes(xv, -1, -2), axis=1), np.swapaxes(av, -1, -2)[:, None] @ g
    else:
        raise _shape_error("propagate", av.shape, xv.shape)

    return _finish(tape, "propagate", (a, x), out, backward)


# --------------------------------------------------------------------------
# Discrete Fourier transform
# --------------------------------------------------------------------------

@dataclass
class ComplexSpectrum:
    """One-sided spectrum of a real signal: floor(T/2)+1 bins."""

    re: np.ndarray
    im: np.ndarray
    length: int

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise NumericsError(f"spectrum parts differ: {self.re.shape} vs {self.im.shape}")

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.re, self.im)

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def full(self) -> np.ndarray:
        """Two-sided spectrum of length T rebuilt from conjugate symmetry."""
        half = self.to_complex()
        tail = np.conj(half[..., 1:self.length - half.shape[-1] + 1][..., ::-1])
        return np.concatenate([half, tail], axis=-1)


@lru_cache(maxsize=None)
def dft_tables(length: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cosine and sine tables [floor(T/2)+1, T] for the one-sided real DFT.

    Angles are reduced modulo T first and quarter turns are exact, so the
    imaginary part of the DC bin (and the Nyquist bin for even T) is exactly 0.
    """
    if length < 1:
        raise NumericsError("empty signal")
    bins = length // 2 + 1
    m = (np.arange(bins)[:, None] * np.arange(length)[None, :]) % length
    angle = 2.0 * np.pi * m / length
    cos = np.cos(angle)
    sin = np.sin(angle)
    quarter = (4 * m) % length == 0
    turn = (4 * m // length) % 4
    cos = np.where(quarter, np.array([1.0, 0.0, -1.0, 0.0])[turn], cos)
    sin = np.where(quarter, np.array([0.0, 1.0, 0.0, -1.0])[turn], sin)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def dft_real(signal) -> ComplexSpectrum:
    """
    Direct O(T^2) DFT of a real signal: X[k] = sum_t x[t] exp(-j 2 pi k t / T).

    Args:
        signal: Real values over the last axis (leading axes are batched)

    Returns:
        One-sided ComplexSpectrum with floor(T/2)+1 bins
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise NumericsError("empty signal")
    check_finite(x, "dft_real")
    cos, sin = dft_tables(x.shape[-1])
    re = x @ cos.T
    im = -(x @ sin.T)
    return ComplexSpectrum(re=re, im=im, length=x.shape[-1])


def circular_shift(signal, shift: int) -> np.ndarray:
    """x'[t] = x[(t - shift) mod T] on the last axis."""
    return np.roll(np.asarray(signal, dtype=np.float64), shift, axis=-1)


def rotate_spectrum(spectrum: ComplexSpectrum, shift: int) -> ComplexSpectrum:
    """Multiply each bin by exp(-j 2 pi k s / T), the spectrum of a circular shift by s."""
    k = np.arange(spectrum.re.shape[-1])
    phase = np.exp(-2j * np.pi * k * shift / spectrum.length)
    rotated = spectrum.to_complex() * phase
    return ComplexSpectrum(re=rotated.real.copy(), im=rotated.imag.copy(), length=spectrum.length)


def spectrum_features(a: Operand, mode: str = "realimag"):
    """
    Spectral features over the last axis.

    mode "realimag" concatenates re and im (2*(T//2+1) values); mode
    "magnitude" returns |X[k]| (T//2+1 values).
    """
    if mode not in FREQ_MODES:
        raise NumericsError(f"unknown spectrum mode '{mode}', expected one of {FREQ_MODES}")
    tape, (x,) = _bind(a)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise NumericsError("empty signal")
    cos, sin = dft_tables(x.shape[-1])
    re = x @ cos.T
    im = -(x @ sin.T)
    bins = cos.shape[0]

    kink = None
    if mode == "realimag":
        out = np.concatenate([re, im], axis=-1)

        def backward(g):
            return (g[..., :bins] @ cos - g[..., bins:] @ sin,)
    else:
        out = np.hypot(re, im)
        safe = np.where(out > 0.0, out, 1.0)
        # DC and Nyquist bins are real, so |X[k]| = |re| there
        real_bins = [0, bins - 1] if x.shape[-1] % 2 == 0 and bins > 1 else [0]
        kink = re[..., real_bins]

        def backward(g):
            g_re = np.where(out > 0.0, g * re / safe, 0.0)
            g_im = np.where(out > 0.0, g * im / safe, 0.0)
            return (g_re @ cos - g_im @ sin,)

    return _finish(tape, f"spectrum_{mode}", (a,), out, backward, kink=kink)
