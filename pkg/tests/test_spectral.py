import numpy as np
import pytest

from decoupled_qc.spectral import KSpace, center_shift, fft3, ifft3
from decoupled_qc.volume import Volume


def naive_dft3(x):
    """O(N^2) triple-sum DFT, independent of any FFT library."""
    n0, n1, n2 = x.shape
    out = np.zeros(x.shape, dtype=complex)
    i = [np.arange(n) for n in x.shape]
    for k0 in range(n0):
        e0 = np.exp(-2j * np.pi * k0 * i[0] / n0)
        for k1 in range(n1):
            e1 = np.exp(-2j * np.pi * k1 * i[1] / n1)
            for k2 in range(n2):
                e2 = np.exp(-2j * np.pi * k2 * i[2] / n2)
                out[k0, k1, k2] = np.einsum("abc,a,b,c->", x, e0, e1, e2)
    return out


def test_zero_volume():
    assert np.all(fft3(Volume(np.zeros((4, 4, 4)))).data == 0)
    assert np.all(ifft3(KSpace(np.zeros((4, 4, 4)))).data == 0)


def test_constant_volume_is_dc_only():
    k = fft3(Volume(np.ones((4, 4, 4)))).data.copy()
    assert abs(k[0, 0, 0] - 64) < 1e-12
    k[0, 0, 0] = 0
    assert np.abs(k).max() < 1e-12


@pytest.mark.parametrize("shape", [(8, 8, 8), (5, 6, 7), (3, 1, 4)])
def test_matches_naive_dft(shape):
    x = np.random.default_rng(0).random(shape)
    assert np.abs(fft3(Volume(x)).data - naive_dft3(x)).max() < 1e-10


def test_round_trip_nonnegative():
    x = np.random.default_rng(1).random((32, 32, 32))
    assert np.abs(ifft3(fft3(Volume(x))).data - x).max() < 1e-10


def test_single_spike_gives_constant_magnitude():
    k = np.zeros((8, 8, 8), dtype=complex)
    k[1, 0, 0] = 1.0
    mag = ifft3(KSpace(k)).data
    assert np.abs(mag - 1 / 512).max() < 1e-15


def test_parseval_and_linearity():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 12, 10, 9))
    fa, fb = fft3(Volume(a)).data, fft3(Volume(b)).data
    lhs = (a**2).sum()
    rhs = (np.abs(fa) ** 2).sum() / a.size
    assert abs(lhs - rhs) / lhs < 1e-10
    combo = fft3(Volume(2.5 * a - 0.7 * b)).data
    assert np.abs(combo - (2.5 * fa - 0.7 * fb)).max() < 1e-10


def test_center_shift():
    k = np.zeros((4, 1, 1), dtype=complex)
    k[0] = 1
    assert center_shift(KSpace(k)).data[2, 0, 0] == 1
    rnd = KSpace(np.random.default_rng(3).standard_normal((4, 6, 8)))
    assert np.array_equal(center_shift(center_shift(rnd)).data, rnd.data)


def test_center_shift_odd_inverse():
    data = np.arange(5, dtype=complex).reshape(5, 1, 1)
    shifted = center_shift(KSpace(data)).data.ravel()
    # explicit index map: centred position p holds FFT index (p - 2) mod 5
    assert shifted.tolist() == [data[(p - 2) % 5, 0, 0] for p in range(5)]
    assert np.array_equal(center_shift(center_shift(KSpace(data)), inverse=True).data, data)


def test_kspace_rejects_non_finite():
    with pytest.raises(ValueError):
        KSpace(np.full((2, 2, 2), np.nan))
