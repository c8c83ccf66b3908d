import numpy as np
import pytest

from dnfeat import AnalyticGaussianPredictor, ConstantPredictor, FormatError, ParameterError, spectral_flatness
from dnfeat import make_linear_schedule, sample_timesteps
from dnfeat.data import (
    MANIFEST,
    gen_fake_dataset,
    gen_real_dataset,
    load_dataset,
    load_manifest,
    sample_images,
    texture_images,
)


def test_textures_are_deterministic_and_prefix_stable():
    a = texture_images(5, seed=1, resolution=16)
    b = texture_images(8, seed=1, resolution=16)
    assert a.tobytes() == b[:5].tobytes()
    assert not np.array_equal(a, texture_images(5, seed=2, resolution=16))
    assert a.min() >= -1 and a.max() <= 1


def test_uncorrelated_field_is_white():
    imgs = texture_images(10, seed=0, resolution=64, correlation_length=0, n_edges=0)
    assert all(spectral_flatness(img) >= 0.8 for img in imgs)


def test_correlated_textures_are_not_white():
    imgs = texture_images(10, seed=0, resolution=64)
    assert all(spectral_flatness(img) < 0.8 for img in imgs)


def test_invalid_texture_parameters():
    with pytest.raises(ParameterError):
        texture_images(0, seed=0)
    with pytest.raises(ParameterError):
        texture_images(1, seed=0, correlation_length=-1)


def test_real_and_fake_dataset_layout(tmp_path):
    s = make_linear_schedule()
    taus = sample_timesteps(1000, 5).tolist()
    gen_real_dataset(tmp_path, 4, seed=0, resolution=8)
    gen_fake_dataset(tmp_path, 3, seed=0, predictor=AnalyticGaussianPredictor(sigma2=0.2), schedule=s,
                     taus=taus, resolution=8)
    rows = load_manifest(tmp_path)
    assert [r.label for r in rows] == [1, 1, 1, 0, 0, 0, 0]
    assert {r.source for r in rows} == {"texture", "analytic"}
    imgs, labels, names = load_dataset(tmp_path, label=0)
    assert imgs.shape == (4, 8, 8) and imgs.dtype == np.uint8 and not labels.any()
    assert names[0] == "real/real_00000.png"
    # regenerating one half leaves the other half's rows in place
    gen_real_dataset(tmp_path, 2, seed=0, resolution=8)
    assert len(load_manifest(tmp_path)) == 5


def test_manifest_validation(tmp_path):
    with pytest.raises(FormatError):
        load_manifest(tmp_path)
    gen_real_dataset(tmp_path, 2, seed=0, resolution=8)
    good = (tmp_path / MANIFEST).read_text()
    for bad in ("name\tlabel\tsource\n", good + "real/real_00000.png\t2\ttexture\n",
                good + "real/missing.png\t0\ttexture\n", good + "too\tfew\n"):
        (tmp_path / MANIFEST).write_text(bad)
        with pytest.raises(FormatError):
            load_manifest(tmp_path)
    (tmp_path / MANIFEST).write_text(good)
    with pytest.raises(ParameterError):
        load_dataset(tmp_path, label=1)


def test_zero_noise_sampler_matches_closed_form():
    # a zero prediction makes every step a rescaling by sqrt(alpha_bar_a / alpha_bar_b)
    s = make_linear_schedule()
    taus = sample_timesteps(1000, 10).tolist()
    out = sample_images(3, seed=4, predictor=ConstantPredictor(0.0), schedule=s, taus=taus, resolution=8)
    xT = np.random.default_rng(4).standard_normal((3, 8, 8))
    np.testing.assert_allclose(out, xT * np.sqrt(s.alpha_bar(taus[0]) / s.alpha_bar(taus[-1])), rtol=1e-12)


def test_sampling_is_seeded(tmp_path):
    s = make_linear_schedule()
    taus = sample_timesteps(1000, 5).tolist()
    p = AnalyticGaussianPredictor(sigma2=0.1)
    for d in ("a", "b"):
        gen_fake_dataset(tmp_path / d, 3, seed=7, predictor=p, schedule=s, taus=taus, resolution=8)
    a = sorted((tmp_path / "a" / "generated").iterdir())
    b = sorted((tmp_path / "b" / "generated").iterdir())
    assert [x.read_bytes() for x in a] == [x.read_bytes() for x in b]
    other = sample_images(3, seed=8, predictor=p, schedule=s, taus=taus, resolution=8)
    assert not np.array_equal(other, sample_images(3, seed=7, predictor=p, schedule=s, taus=taus, resolution=8))


def _analytic_sampler_gain(taus, schedule, sigma2):
    # zero-mean analytic prediction is c * x, so each sampling step multiplies by a scalar
    g = 1.0
    for b, a in zip(taus[::-1], taus[-2::-1]):
        ab_a, ab_b = schedule.alpha_bar(a), schedule.alpha_bar(b)
        c = np.sqrt(1 - ab_b) / (ab_b * sigma2 + 1 - ab_b)
        g *= np.sqrt(ab_a / ab_b) * (1 - np.sqrt(1 - ab_b) * c) + np.sqrt(1 - ab_a) * c
    return g


@pytest.mark.parametrize("S", [10, 50])
def test_analytic_sampler_matches_scalar_gain(S):
    s = make_linear_schedule()
    taus = sample_timesteps(1000, S).tolist()
    out = sample_images(4, seed=0, predictor=AnalyticGaussianPredictor(sigma2=0.25), schedule=s, taus=taus,
                        resolution=8)
    xT = np.random.default_rng(0).standard_normal((4, 8, 8))
    np.testing.assert_allclose(out, _analytic_sampler_gain(taus, s, 0.25) * xT, rtol=1e-10)


def test_analytic_sampler_reaches_prior_variance():
    s = make_linear_schedule()
    taus = sample_timesteps(1000, 250).tolist()
    out = sample_images(200, seed=0, predictor=AnalyticGaussianPredictor(sigma2=0.25), schedule=s, taus=taus,
                        resolution=8)
    assert abs(out.var() / 0.25 - 1) < 0.10
