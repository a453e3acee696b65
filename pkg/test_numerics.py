"""
Tests for the tensor kernels, the real DFT and the reverse-mode tape.
"""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lib.errors import NumericsError
from lib.numerics import (
    Tape,
    add,
    circular_shift,
    concat,
    conv1x1,
    dft_real,
    dft_tables,
    dilated_causal_conv,
    masked_abs_mean,
    matmul,
    mul,
    propagate,
    reduce_sum,
    relu,
    rotate_spectrum,
    sigmoid,
    softmax_rows,
    spectrum_features,
    take_rows,
    tanh,
    transpose,
    value,
)

finite = st.floats(min_value=-100.0, max_value=100.0, allow_nan=False, allow_infinity=False)
signals = arrays(np.float64, 12, elements=finite)


def numeric_grad(fn, arr, eps=1e-6):
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = fn(arr)
        flat[i] = orig - eps
        minus = fn(arr)
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2 * eps)
    return grad


# --------------------------------------------------------------------------
# DFT
# --------------------------------------------------------------------------

@given(signals, st.integers(min_value=0, max_value=11))
def test_shift_theorem(signal, shift):
    shifted = dft_real(circular_shift(signal, shift))
    rotated = rotate_spectrum(dft_real(signal), shift)
    assert np.max(np.abs(shifted.re - rotated.re)) < 1e-10
    assert np.max(np.abs(shifted.im - rotated.im)) < 1e-10


def test_shift_theorem_thousand_pairs():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        signal = rng.normal(0.0, 10.0, size=12)
        shift = int(rng.integers(0, 12))
        a = dft_real(circular_shift(signal, shift)).to_complex()
        b = rotate_spectrum(dft_real(signal), shift).to_complex()
        worst = max(worst, float(np.max(np.abs(a - b))))
    assert worst < 1e-10


@given(signals, st.integers(min_value=-30, max_value=30))
def test_magnitude_is_shift_invariant(signal, shift):
    a = dft_real(signal).magnitude()
    b = dft_real(circular_shift(signal, shift)).magnitude()
    assert np.allclose(a, b, rtol=0.0, atol=1e-12 * max(1.0, np.abs(signal).sum()))


@given(signals)
def test_parseval(signal):
    full = dft_real(signal).full()
    energy = np.sum(signal ** 2)
    assert np.isclose(energy, np.sum(np.abs(full) ** 2) / 12, rtol=1e-10, atol=1e-9)


@pytest.mark.parametrize("length", [1, 2, 5, 12, 13])
def test_dft_matches_numpy(length):
    signal = np.random.default_rng(length).normal(size=length)
    spectrum = dft_real(signal)
    expected = np.fft.rfft(signal)
    assert np.allclose(spectrum.to_complex(), expected, atol=1e-10)
    assert np.allclose(spectrum.full(), np.fft.fft(signal), atol=1e-10)


def test_dc_and_nyquist_are_exactly_real():
    signal = np.random.default_rng(3).normal(size=(5, 12))
    spectrum = dft_real(signal)
    assert np.all(spectrum.im[:, 0] == 0.0)
    assert np.all(spectrum.im[:, 6] == 0.0)


def test_impulse_has_flat_spectrum():
    signal = np.zeros(12)
    signal[0] = 1.0
    spectrum = dft_real(signal)
    assert np.allclose(spectrum.re, 1.0)
    assert np.allclose(spectrum.im, 0.0)


def test_dft_tables_are_read_only():
    cos, sin = dft_tables(12)
    assert cos.shape == (7, 12)
    with pytest.raises(ValueError):
        cos[0, 0] = 2.0


def test_empty_signal_rejected():
    with pytest.raises(NumericsError, match="empty signal"):
        dft_real(np.zeros(0))


def test_spectrum_features_widths():
    x = np.random.default_rng(0).normal(size=(3, 12))
    assert spectrum_features(x, "realimag").shape == (3, 14)
    assert spectrum_features(x, "magnitude").shape == (3, 7)
    with pytest.raises(NumericsError):
        spectrum_features(x, "phase")


@pytest.mark.parametrize("mode", ["realimag", "magnitude"])
def test_spectrum_features_gradient(mode):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 12))
    weights = rng.normal(size=(2, 14 if mode == "realimag" else 7))

    def loss(arr):
        return float(np.sum(spectrum_features(arr, mode) * weights))

    tape = Tape()
    var = tape.parameter("x", x)
    grads = tape.backward(reduce_sum(mul(spectrum_features(var, mode), weights)))
    assert np.allclose(grads["x"], numeric_grad(loss, x.copy()), atol=1e-6)


# --------------------------------------------------------------------------
# Kernels and tape
# --------------------------------------------------------------------------

def test_composite_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    c = rng.normal(size=(3, 5))

    def forward(x, y):
        h = softmax_rows(matmul(x, y))
        return reduce_sum(mul(tanh(add(h, sigmoid(matmul(x, y)))), c))

    tape = Tape()
    grads = tape.backward(forward(tape.parameter("a", a), tape.parameter("b", b)))
    assert np.allclose(grads["a"], numeric_grad(lambda arr: float(forward(arr, b)), a.copy()), atol=1e-7)
    assert np.allclose(grads["b"], numeric_grad(lambda arr: float(forward(a, arr)), b.copy()), atol=1e-7)


def test_matmul_shape_mismatch_message():
    with pytest.raises(NumericsError, match=r"shape mismatch \(3, 4\) vs \(5, 2\)"):
        matmul(np.zeros((3, 4)), np.zeros((5, 2)))


def test_loss_from_another_tape_rejected():
    first, second = Tape(), Tape()
    loss = reduce_sum(second.parameter("w", np.ones(3)))
    with pytest.raises(NumericsError, match="not on this tape"):
        first.backward(loss)


def test_backward_needs_scalar():
    tape = Tape()
    out = relu(tape.parameter("w", np.ones((2, 2))))
    with pytest.raises(NumericsError, match="scalar"):
        tape.backward(out)


def test_parameter_registered_twice_rejected():
    tape = Tape()
    tape.parameter("w", np.ones(2))
    with pytest.raises(NumericsError):
        tape.parameter("w", np.ones(2))


def test_non_finite_output_rejected():
    with pytest.raises(NumericsError, match="non-finite"):
        mul(np.array([np.inf]), np.array([0.0]))


def test_unused_parameter_gets_zero_gradient():
    tape = Tape()
    used = tape.parameter("used", np.ones(3))
    tape.parameter("unused", np.ones(2))
    grads = tape.backward(reduce_sum(used))
    assert np.array_equal(grads["unused"], np.zeros(2))
    assert np.array_equal(grads["used"], np.ones(3))


def test_relu_derivative_at_zero_is_zero():
    tape = Tape()
    x = tape.parameter("x", np.array([-1.0, 0.0, 2.0]))
    grads = tape.backward(reduce_sum(relu(x)))
    assert grads["x"].tolist() == [0.0, 0.0, 1.0]


def test_kink_signature_tracks_relu_inputs():
    tape = Tape()
    relu(tape.parameter("x", np.array([-1.0, 3.0])))
    relu(tape.constant(np.array([[2.0, -2.0]])))
    assert tape.kink_signature().tolist() == [False, True, True, False]


@given(arrays(np.float64, (4, 6), elements=st.floats(min_value=-50, max_value=50)))
def test_softmax_rows_are_distributions(x):
    out = softmax_rows(x)
    assert np.all(out >= 0.0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_masked_abs_mean_ignores_zero_targets():
    pred = np.array([1.0, 5.0, 2.0])
    target = np.array([2.0, 0.0, 4.0])
    assert float(masked_abs_mean(pred, target)) == pytest.approx(1.5)


def test_masked_abs_mean_all_masked_is_zero_with_zero_grad():
    tape = Tape()
    p = tape.parameter("p", np.array([1.0, 2.0]))
    loss = masked_abs_mean(p, np.zeros(2))
    assert float(value(loss)) == 0.0
    assert np.array_equal(tape.backward(loss)["p"], np.zeros(2))


def test_take_rows_accumulates_repeated_rows():
    tape = Tape()
    table = tape.parameter("t", np.arange(6.0).reshape(3, 2))
    grads = tape.backward(reduce_sum(take_rows(table, np.array([2, 0, 2]))))
    assert grads["t"].tolist() == [[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]


def test_concat_and_transpose_gradients():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    weights = rng.normal(size=(5, 2))
    tape = Tape()
    va, vb = tape.parameter("a", a), tape.parameter("b", b)
    grads = tape.backward(reduce_sum(mul(transpose(concat([va, vb], axis=1)), weights)))
    assert np.allclose(grads["a"], weights[:3].T)
    assert np.allclose(grads["b"], weights[3:].T)


def test_conv1x1_matches_einsum():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4, 5))
    w = rng.normal(size=(6, 3))
    b = rng.normal(size=6)
    expected = np.einsum("oc,bcnt->bont", w, x) + b[None, :, None, None]
    assert np.allclose(conv1x1(x, w, b, axis=1), expected)


def test_conv1x1_gradient():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(5, 3))
    c = rng.normal(size=(2, 5, 4))

    def loss(arr):
        return float(np.sum(conv1x1(x, arr, axis=1) * c))

    tape = Tape()
    grads = tape.backward(reduce_sum(mul(conv1x1(x, tape.parameter("w", w), axis=1), c)))
    assert np.allclose(grads["w"], numeric_grad(loss, w.copy()), atol=1e-7)


def test_dilated_conv_is_causal():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 10))
    w = rng.normal(size=(2, 3, 2))
    dilation = 2
    span = dilation * (w.shape[2] - 1)
    base = dilated_causal_conv(x, w, dilation=dilation)
    assert base.shape == (2, 10 - span)
    for j in range(x.shape[1]):
        bumped = x.copy()
        bumped[:, j] += 1.0
        changed = np.any(dilated_causal_conv(bumped, w, dilation=dilation) != base, axis=0)
        for i in np.flatnonzero(changed):
            # output i is aligned to input i + span and never sees later inputs
            assert j <= i + span


def test_dilated_conv_gradient():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 2, 3, 7))
    w = rng.normal(size=(4, 2, 2))
    c = rng.normal(size=(1, 4, 3, 5))

    def loss(arr):
        return float(np.sum(dilated_causal_conv(arr, w, dilation=2, channel_axis=1) * c))

    tape = Tape()
    out = dilated_causal_conv(tape.parameter("x", x), w, dilation=2, channel_axis=1)
    grads = tape.backward(reduce_sum(mul(out, c)))
    assert np.allclose(grads["x"], numeric_grad(loss, x.copy()), atol=1e-7)


def test_dilated_conv_rejects_bad_arguments():
    w = np.ones((1, 1, 2))
    with pytest.raises(NumericsError, match="dilation"):
        dilated_causal_conv(np.ones((1, 8)), w, dilation=0)
    with pytest.raises(NumericsError, match="receptive field"):
        dilated_causal_conv(np.ones((1, 4)), w, dilation=4)


def test_propagate_with_identity_and_batched_graphs():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 3, 4, 5))
    assert np.allclose(propagate(np.eye(4), x), x)
    a = rng.uniform(size=(2, 4, 4))
    out = propagate(a, x)
    assert np.allclose(out[1, :, :, 0], (a[1] @ x[1, :, :, 0].T).T)
    with pytest.raises(NumericsError):
        propagate(np.eye(3), x)


@pytest.mark.parametrize("batched", [False, True])
def test_propagate_gradient(batched):
    rng = np.random.default_rng(11)
    a0 = rng.uniform(size=(2, 4, 4) if batched else (4, 4))
    x0 = rng.normal(size=(2, 3, 4, 5))
    weights = rng.normal(size=(2, 3, 4, 5))

    tape = Tape()
    a, x = tape.parameter("a", a0), tape.parameter("x", x0)
    grads = tape.backward(reduce_sum(mul(propagate(a, x), weights)))
    assert np.allclose(grads["a"], numeric_grad(lambda arr: float(np.sum(propagate(arr, x0) * weights)), a0.copy()),
                       atol=1e-6)
    assert np.allclose(grads["x"], numeric_grad(lambda arr: float(np.sum(propagate(a0, arr) * weights)), x0.copy()),
                       atol=1e-6)


def test_magnitude_features_record_real_bin_kinks():
    tape = Tape()
    x = np.array([[1.0, -2.0, 0.5, 3.0], [-1.0, -1.0, -1.0, -1.0]])
    spectrum_features(tape.parameter("x", x), "magnitude")
    # (DC, Nyquist) per row: (2.5, 0.5) and (-4, 0)
    assert tape.kink_signature().tolist() == [True, True, False, False]

    odd = Tape()
    spectrum_features(odd.parameter("x", np.ones(5)), "magnitude")
    assert odd.kink_signature().tolist() == [True]

    linear = Tape()
    spectrum_features(linear.parameter("x", x), "realimag")
    assert linear.kink_signature().size == 0
