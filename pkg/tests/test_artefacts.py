import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decoupled_qc.artefacts import (
    ARTEFACT_KINDS,
    ArtefactKind,
    ArtefactPipelineConfig,
    ArtefactSpec,
    apply_bias_field,
    apply_blur,
    apply_k_noise,
    apply_motion,
    apply_rf_spike,
    apply_wrap,
    augment_labels,
    bias_field,
    corrupt,
    motion_kspace,
    n_bias_terms,
    noise_sigma,
    sample_pipeline,
    sample_spec,
    specs_from_json,
    specs_to_json,
    wrap_keep_mask,
)
from decoupled_qc.spectral import KSpace, fft3, ifft3, ifft3_complex
from decoupled_qc.volume import Affine3D, LabelVolume, Volume, normalize


def _rand_vol(shape=(16, 12, 8), seed=0):
    return Volume(np.random.default_rng(seed).random(shape))


def _image_snr_db(vol, k_noisy):
    noise = ifft3_complex(k_noisy) - vol.data
    return 10 * math.log10(np.mean(vol.data**2) / np.mean(np.abs(noise) ** 2))


# --- RF spike ---------------------------------------------------------------

def test_spike_overwrite_with_existing_value_is_noop():
    v = _rand_vol()
    k = fft3(v)
    loc = (3, 2, 1)
    current = k.data[loc]
    m = abs(current) / np.abs(k.data).max()
    out = apply_rf_spike(k, m, loc, np.angle(current))
    assert np.abs(out.data - k.data).max() < 1e-10


def test_spike_zero_magnitude_zeroes_one_sample():
    k = fft3(_rand_vol())
    out = apply_rf_spike(k, 0.0, (1, 1, 1), 0.3)
    assert out.data[1, 1, 1] == 0
    diff = out.data != k.data
    assert diff.sum() == 1


@pytest.mark.parametrize("m,phase", [(1.0, 0.0), (2.5, 1.1), (10.0, -2.0)])
def test_spike_stripe_matches_closed_form(m, phase):
    shape = (16, 4, 4)
    k = fft3(Volume(np.ones(shape)))
    out = ifft3(apply_rf_spike(k, m, (1, 0, 0), phase)).data
    # DC = N and spike = m*N*e^{i phase}; divided by N in the inverse transform
    x = np.arange(16)[:, None, None]
    oracle = np.abs(1.0 + m * np.exp(1j * (phase + 2 * np.pi * x / 16)))
    assert np.abs(out - np.broadcast_to(oracle, shape)).max() < 1e-12


def test_spike_rejects_bad_location():
    k = fft3(_rand_vol())
    with pytest.raises(IndexError):
        apply_rf_spike(k, 1.0, (16, 0, 0), 0.0)
    with pytest.raises(ValueError):
        apply_rf_spike(k, 1.0, (0, 0, 0), 0.0)


# --- k-space noise ----------------------------------------------------------

def test_noise_infinite_snr_is_identity():
    k = fft3(_rand_vol())
    assert apply_k_noise(k, math.inf, 0) is k
    for bad in (math.nan, -math.inf):
        with pytest.raises(ValueError):
            apply_k_noise(k, bad, 0)


def test_noise_sigma_formula():
    # constant volume of ones, 4^3: sum|k|^2 = 64^2, signal power 1, 10 dB -> N/10
    k = fft3(Volume(np.ones((4, 4, 4))))
    assert noise_sigma(k, 10.0) == pytest.approx(math.sqrt(64 / 10), rel=1e-12)


def test_noise_20db_on_unit_cube():
    v = Volume(np.ones((64, 64, 64)))
    k = fft3(v)
    snr = _image_snr_db(v, apply_k_noise(k, 20.0, np.random.default_rng(5)))
    assert 19.0 <= snr <= 21.0


def test_noise_minus_10db_power_ratio():
    v = _rand_vol((32, 32, 32), 1)
    k = fft3(v)
    ratios = []
    for seed in range(10):
        noise = ifft3_complex(apply_k_noise(k, -10.0, seed)) - v.data
        ratios.append(np.mean(np.abs(noise) ** 2) / np.mean(v.data**2))
    assert abs(np.mean(ratios) / 10.0 - 1.0) < 0.15


def test_noise_equal_real_imag_variance_and_dc():
    k = KSpace(np.zeros((32, 32, 32)) + 1e-3)
    k = k.with_data(k.data.astype(complex))
    noisy = apply_k_noise(k, 0.0, 3).data - k.data
    assert np.var(noisy.real) == pytest.approx(np.var(noisy.imag), rel=0.05)
    assert abs(noisy.real.mean()) < 5 * noisy.real.std() / math.sqrt(noisy.size)


# --- blur -------------------------------------------------------------------

def _sinusoid(freq, n=16):
    x = np.arange(n)
    return Volume(np.broadcast_to((2.0 + np.cos(2 * np.pi * freq * x / n))[:, None, None],
                                  (n, 2, 2)).copy())


def test_blur_ratio_one_identity():
    k = fft3(_rand_vol())
    assert np.array_equal(apply_blur(k, 1.0, [0, 1, 2]).data, k.data)


def test_blur_keeps_low_frequency():
    v = _sinusoid(1)
    out = ifft3(apply_blur(fft3(v), 2.0, [0])).data
    assert np.abs(out - v.data).max() < 1e-12


def test_blur_removes_high_frequency():
    v = _sinusoid(7)
    out = ifft3(apply_blur(fft3(v), 4.0, [0])).data
    assert np.abs(out - 2.0).max() < 1e-12


def test_blur_band_width():
    for n in (5, 16, 17, 32):
        for ratio in (1.0, 2.0, 3.3, 12.0):
            k = KSpace(np.ones((n, 1, 1), dtype=complex))
            kept = np.count_nonzero(apply_blur(k, ratio, [0]).data)
            assert kept == min(n, math.ceil(n / ratio))


def test_blur_errors():
    k = fft3(_rand_vol())
    with pytest.raises(ValueError):
        apply_blur(k, 2.0, [])
    with pytest.raises(ValueError):
        apply_blur(k, 0.5, [0])


# --- wrap -------------------------------------------------------------------

@pytest.mark.parametrize("n,step", [(32, 2), (32, 4), (24, 3)])
def test_regular_wrap_is_ghost_superposition(n, step):
    v = _rand_vol((8, n, 6), 2).data
    fraction = 1.0 - 1.0 / step
    out = ifft3(apply_wrap(fft3(Volume(v)), fraction, "regular", axis=1)).data
    ghosts = sum(np.roll(v, j * n // step, axis=1) for j in range(step)) / step
    assert np.abs(out - np.abs(ghosts)).max() < 1e-8


def test_wrap_random_replay_and_dc():
    k = fft3(_rand_vol())
    a = apply_wrap(k, 0.5, "random", 0, np.random.default_rng(9))
    b = apply_wrap(k, 0.5, "random", 0, np.random.default_rng(9))
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(a.data[0], k.data[0])
    assert np.count_nonzero(wrap_keep_mask(16, 0.5, "random", 9)) == 8


def test_wrap_tiny_fraction_identity():
    k = fft3(_rand_vol())
    assert np.array_equal(apply_wrap(k, 1e-9, "regular", 2).data, k.data)
    assert np.array_equal(apply_wrap(k, 1e-9, "random", 2, 0).data, k.data)


def test_wrap_errors():
    with pytest.raises(ValueError):
        wrap_keep_mask(8, 1.0, "regular")
    with pytest.raises(ValueError):
        wrap_keep_mask(8, 0.5, "diagonal")


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.floats(0.01, 0.99), st.sampled_from(["random", "regular"]),
       st.integers(0, 1000))
def test_wrap_mask_always_keeps_dc(n, fraction, pattern, seed):
    assert wrap_keep_mask(n, fraction, pattern, seed)[0]


# --- motion -----------------------------------------------------------------

@pytest.mark.parametrize("offset", [(1, 0, 0), (2, -1, 3)])
def test_identical_translations_cancel(offset):
    v = _rand_vol((12, 10, 8), 3)
    t = Affine3D.translation(offset)
    out = apply_motion(v, [t, t, t], [0, 3, 7, 10], axis=1)
    assert np.abs(out.data - v.data).max() < 1e-10


def test_identical_rotations_cancel():
    v = _rand_vol((12, 10, 8), 3)
    t = Affine3D.from_rigid([0.1, -0.05, 0.2], [1.5, 0.0, -2.0])
    out = apply_motion(v, [t] * 4, [0, 2, 5, 6, 10], axis=1)
    assert np.abs(out.data - v.data).max() < 1e-10


def test_single_identity_segment():
    v = _rand_vol()
    out = apply_motion(v, [Affine3D.identity()], [0, 12], axis=1)
    assert np.abs(out.data - v.data).max() < 1e-10


def test_common_translation_is_removed():
    v = _rand_vol((12, 10, 8), 4)
    base = [Affine3D.translation((0, 0, 0)), Affine3D.translation((2, 0, 0))]
    shifted = [Affine3D.translation(t.matrix[:3, 3] + [1, -1, 2]) for t in base]
    a = apply_motion(v, base, [0, 5, 10], axis=1).data
    b = apply_motion(v, shifted, [0, 5, 10], axis=1).data
    assert np.abs(a - b).max() < 1e-10


def test_shift_theorem_phase_ramp():
    rng = np.random.default_rng(5)
    data = np.zeros((16, 8, 6))
    # compact support so the zero-fill shift is also a circular shift
    data[2:10] = rng.random((8, 8, 6))
    v = Volume(data)
    d = 3
    k = motion_kspace(v, [Affine3D.identity(), Affine3D.translation((d, 0, 0))],
                      [0, 4, 8], axis=1, demean=False).data
    ref = fft3(v).data
    # acquisition blocks run over centred planes; block 2 holds FFT indices 0..3
    planes = np.fft.fftshift(np.arange(8))[4:]
    kx = np.arange(16)[:, None, None]
    ramp = np.exp(-2j * np.pi * kx * d / 16)
    assert np.abs(k[:, planes] - ref[:, planes] * ramp).max() < 1e-8
    other = np.fft.fftshift(np.arange(8))[:4]
    assert np.abs(k[:, other] - ref[:, other]).max() < 1e-8


def test_motion_errors():
    v = _rand_vol()
    with pytest.raises(ValueError):
        apply_motion(v, [Affine3D.identity()] * 2, [0, 12], axis=1)
    with pytest.raises(ValueError):
        apply_motion(v, [Affine3D.identity()] * 2, [0, 0, 12], axis=1)
    m = np.eye(4)
    m[1, 1] = 0
    with pytest.raises(np.linalg.LinAlgError):
        apply_motion(v, [Affine3D(m)], [0, 12], axis=1)


# --- bias field -------------------------------------------------------------

def test_bias_zero_and_constant():
    v = _rand_vol()
    n = n_bias_terms(3)
    assert np.abs(apply_bias_field(v, np.zeros(n), 3).data - v.data).max() < 1e-15
    c = np.zeros(n)
    c[0] = 0.7
    assert np.allclose(apply_bias_field(v, c, 3).data, v.data * math.exp(0.7), rtol=1e-14)


def test_bias_term_count():
    assert [n_bias_terms(o) for o in (1, 2, 3)] == [4, 10, 20]


def test_bias_field_matches_polynomial_and_is_smooth():
    rng = np.random.default_rng(6)
    coeffs = rng.uniform(-0.5, 0.5, 20)
    shape = (9, 7, 5)
    f = bias_field(shape, coeffs, 3)
    assert np.all(f > 0)
    # independent evaluation: every monomial with total degree <= 3
    monos = [(a, b, c) for d in range(4) for a in range(d + 1) for b in range(d + 1 - a)
             for c in [d - a - b]]
    assert len(monos) == 20
    x, y, z = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    # the coefficient order differs, so compare fields over a permutation search on log-values
    log_f = np.log(f)
    design = np.stack([(x**a * y**b * z**c).ravel() for a, b, c in monos], axis=1)
    fit, *_ = np.linalg.lstsq(design, log_f.ravel(), rcond=None)
    assert np.abs(design @ fit - log_f.ravel()).max() < 1e-10
    assert sorted(np.round(fit, 8)) == sorted(np.round(coeffs, 8))
    # gradient of P on [-1,1]^3 is bounded by sum |c| * degree
    bound = sum(abs(c) * (a + b + cc) for c, (a, b, cc) in zip(fit, monos))
    for axis, n in enumerate(shape):
        step = 2.0 / (n - 1)
        assert np.abs(np.diff(log_f, axis=axis)).max() / step <= bound + 1e-9


def test_bias_keeps_positive_voxels_positive():
    v = _rand_vol()
    coeffs = np.random.default_rng(7).uniform(-0.5, 0.5, 20)
    out = apply_bias_field(v, coeffs, 3).data
    assert np.all(out[v.data > 0] > 0)


# --- specs, sampling and composition ---------------------------------------

@pytest.mark.parametrize("kind,params", [
    ("rf_spike", {"magnitude": 11.0, "location": [1, 0, 0], "phase": 0.0}),
    ("rf_spike", {"magnitude": 2.0, "location": [0, 0, 0], "phase": 0.0}),
    ("k_noise", {"snr_db": 25.0}),
    ("blur", {"ratio": 13.0, "axes": [0]}),
    ("blur", {"ratio": 2.0, "axes": []}),
    ("wrap", {"fraction": 1.0, "pattern": "regular", "axis": 0}),
    ("motion", {"transforms": [np.eye(4).tolist()] * 9, "boundaries": list(range(10)),
                "axis": 0}),
    ("bias_field", {"coefficients": [0.0] * 3, "order": 1}),
])
def test_spec_validation(kind, params):
    with pytest.raises(ValueError):
        ArtefactSpec(kind, params, 0)


def test_specs_json_round_trip():
    rng = np.random.default_rng(8)
    specs = [sample_spec(k, (16, 16, 4), (1, 1, 2), rng) for k in ArtefactKind]
    text = specs_to_json(specs, note="x")
    assert json.loads(text)["note"] == "x"
    assert specs_from_json(text) == specs


def test_pipeline_rate_zero_is_empty():
    cfg = ArtefactPipelineConfig(rate=0.0)
    rng = np.random.default_rng(0)
    assert all(sample_pipeline(cfg, rng, (8, 8, 8)) == [] for _ in range(200))


def test_pipeline_noise_only():
    cfg = ArtefactPipelineConfig(rate=1.0, kinds=("k_noise",), probabilities={"k_noise": 0.35})
    rng = np.random.default_rng(1)
    for _ in range(300):
        specs = sample_pipeline(cfg, rng, (8, 8, 8))
        assert [s.kind for s in specs] == [ArtefactKind.K_NOISE]
        assert -10.0 <= specs[0].params["snr_db"] <= 20.0


def test_pipeline_rate_half_frequency():
    cfg = ArtefactPipelineConfig(rate=0.5)
    rng = np.random.default_rng(2)
    hits = sum(bool(sample_pipeline(cfg, rng, (8, 8, 1))) for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5) <= 0.02


def test_pipeline_order_is_fixed():
    cfg = ArtefactPipelineConfig(rate=1.0, probabilities={k: 1.0 for k in ARTEFACT_KINDS},
                                 geometric=1.0, bias_field=1.0)
    specs = sample_pipeline(cfg, 3, (8, 8, 8))
    assert [s.kind.value for s in specs] == [
        "geometric", "bias_field", "motion", "rf_spike", "k_noise", "blur", "wrap"]


def test_corrupt_empty_is_normalize():
    v = _rand_vol()
    out, specs = corrupt(v, [])
    assert specs == [] and np.array_equal(out.data, normalize(v).data)


def test_corrupt_single_blur_matches_direct_path():
    v = _rand_vol()
    spec = ArtefactSpec("blur", {"ratio": 2.0, "axes": [0, 1]}, 0)
    out, _ = corrupt(v, [spec])
    direct = normalize(ifft3(apply_blur(fft3(v), 2.0, [0, 1])))
    assert np.array_equal(out.data, direct.data)


def test_corrupt_rejects_misordered_specs():
    a = ArtefactSpec("wrap", {"fraction": 0.5, "pattern": "regular", "axis": 0}, 0)
    b = ArtefactSpec("k_noise", {"snr_db": 0.0}, 0)
    with pytest.raises(ValueError):
        corrupt(_rand_vol(), [a, b])


def test_corrupt_deterministic_replay():
    cfg = ArtefactPipelineConfig(rate=1.0, probabilities={k: 1.0 for k in ARTEFACT_KINDS},
                                 geometric=1.0, bias_field=1.0)
    v = _rand_vol((16, 16, 4))
    specs = sample_pipeline(cfg, 11, v.shape, v.spacing)
    a, _ = corrupt(v, specs)
    b, _ = corrupt(v, specs_from_json(specs_to_json(specs)))
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.min() == 0 and a.data.max() == 1


def test_augment_labels_follows_geometry_only():
    lab = LabelVolume(np.pad(np.ones((2, 2, 1), dtype=int), ((1, 5), (1, 5), (0, 0))), 2)
    noise = ArtefactSpec("k_noise", {"snr_db": 0.0}, 0)
    assert augment_labels(lab, [noise]) is lab
    shift = Affine3D.translation((2, 0, 0)).tolist()
    moved = augment_labels(lab, [ArtefactSpec("geometric", {"matrix": shift}, 0)])
    assert np.array_equal(moved.labels, np.roll(lab.labels, 2, axis=0))


def test_thin_volume_sampling_stays_in_plane():
    rng = np.random.default_rng(4)
    for _ in range(50):
        spec = sample_spec("motion", (32, 32, 1), (6, 6, 6), rng)
        assert spec.params["axis"] in (0, 1)
        for m in spec.params["transforms"]:
            a = Affine3D(np.asarray(m))
            rot, trans = a.rigid_params()
            assert abs(rot[0]) < 1e-12 and abs(rot[1]) < 1e-12 and trans[2] == 0
