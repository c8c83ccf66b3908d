import io
import pickle
import struct
import sys
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnfeat import (
    AnalyticGaussianPredictor,
    ConstantPredictor,
    ExternalPredictor,
    FormatError,
    ParameterError,
    TinyDenoiser,
    TrainingError,
    TransportError,
    analytic_predict,
    make_linear_schedule,
    train_predictor,
)
from dnfeat.formats import decode_tensor, encode_tensor
from dnfeat.predictor import HANDSHAKE, encode_request, external_predict, serve
from oracles import posterior_noise_mc

SCHED = make_linear_schedule()


def peer(*args):
    return [sys.executable, "-m", "dnfeat.peer", *args]


def one_step_schedule(alpha_bar):
    return make_linear_schedule(1, 1 - alpha_bar, 1 - alpha_bar)


# -- analytic oracle ------------------------------------------------------------

def test_analytic_hand_example():
    s = one_step_schedule(0.75)
    p = AnalyticGaussianPredictor(0.0, 1.0)
    assert analytic_predict(p, np.array(2.0), 1, s) == pytest.approx(1.0, abs=1e-15)


def test_analytic_matches_monte_carlo_at_three_quarters():
    s = one_step_schedule(0.75)
    p = AnalyticGaussianPredictor(0.0, 1.0)
    rng = np.random.default_rng(12)
    for x in rng.standard_normal(3) * 1.5:
        est, se, _ = posterior_noise_mc(x, 0.75, 0.0, 1.0, rng)
        assert abs(est - float(analytic_predict(p, np.array(x), 1, s))) <= 3 * se


def test_analytic_zero_input_and_mean_input():
    p = AnalyticGaussianPredictor(0.0, 1.0)
    for t in (1, 17, 500, 1000):
        out = analytic_predict(p, np.zeros((3, 3)), t, SCHED)
        assert np.array_equal(out, np.zeros((3, 3)))


def test_analytic_general_formula():
    p = AnalyticGaussianPredictor(0.3, 0.5)
    x = np.linspace(-2, 2, 9)
    t = 300
    a = SCHED.alpha_bar(t)
    m = (np.sqrt(a) * 0.5 * x + (1 - a) * 0.3) / (a * 0.5 + 1 - a)
    np.testing.assert_allclose(analytic_predict(p, x, t, SCHED), (x - np.sqrt(a) * m) / np.sqrt(1 - a), rtol=1e-14)


def test_analytic_is_affine():
    rng = np.random.default_rng(0)
    p = AnalyticGaussianPredictor(0.7, 2.0)
    for t in (1, 250, 999):
        x, y = rng.standard_normal((2, 5, 5))
        al, be = 1.7, -0.4
        c = analytic_predict(p, np.zeros((5, 5)), t, SCHED)
        lhs = analytic_predict(p, al * x + be * y, t, SCHED)
        rhs = al * analytic_predict(p, x, t, SCHED) + be * analytic_predict(p, y, t, SCHED) + (1 - al - be) * c
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_analytic_tensor_mean_and_validation():
    mu = np.arange(4.0).reshape(2, 2)
    p = AnalyticGaussianPredictor(mu, 1.0)
    assert analytic_predict(p, np.zeros((2, 2)), 5, SCHED).shape == (2, 2)
    with pytest.raises(ParameterError):
        AnalyticGaussianPredictor(0.0, 0.0)
    with pytest.raises(ParameterError):
        analytic_predict(AnalyticGaussianPredictor(), np.zeros(3), 0, SCHED)
    with pytest.raises(ParameterError):
        analytic_predict(AnalyticGaussianPredictor(), np.zeros(3), 1001, SCHED)


def test_constant_predictor_counts_calls():
    p = ConstantPredictor(2.5)
    out = p.predict_noise(np.zeros((2, 3)), 4, SCHED)
    assert np.array_equal(out, np.full((2, 3), 2.5))
    assert p.calls == 1


_small = TinyDenoiser(width=4, embed_dim=4, steps=0, seed=3).fit(np.zeros((2, 4, 4)), schedule=SCHED)


@settings(max_examples=1000, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), n=st.integers(0, 3), t=st.integers(1, 1000),
       which=st.sampled_from(["analytic", "constant", "tiny"]))
def test_shape_contract(h, w, n, t, which):
    p = {"analytic": AnalyticGaussianPredictor(0.1, 0.8), "constant": ConstantPredictor(1.0), "tiny": _small}[which]
    shape = (h, w) if n == 0 else (n, h, w)
    x = np.random.default_rng(h * 100 + w).standard_normal(shape)
    out = p.predict_noise(x, t, SCHED)
    assert out.shape == shape
    assert np.array_equal(out, p.predict_noise(x.copy(), t, SCHED))


# -- trainable denoiser -----------------------------------------------------------

def test_zero_data_learns_exact_noise_map():
    m = TinyDenoiser(steps=200, seed=0).fit(np.zeros((64, 8, 8)), schedule=SCHED)
    rng = np.random.default_rng(1)
    errs = []
    for t in rng.integers(1, 1001, 100):
        a = SCHED.alpha_bar(t)
        x = np.sqrt(1 - a) * rng.standard_normal((8, 8))
        errs.append(np.mean((m.predict_noise(x, t, SCHED) - x / np.sqrt(1 - a)) ** 2))
    assert np.sqrt(np.mean(errs)) < 0.05


def test_gaussian_data_matches_analytic_oracle():
    rng = np.random.default_rng(2)
    m = train_predictor(rng.standard_normal((512, 8, 8)), SCHED, {"steps": 200, "seed": 0})
    oracle = AnalyticGaussianPredictor(0.0, 1.0)
    errs = []
    for t in rng.integers(1, 1001, 100):
        x = rng.standard_normal((8, 8))
        errs.append(np.mean((m.predict_noise(x, t, SCHED) - oracle.predict_noise(x, t, SCHED)) ** 2))
    assert np.sqrt(np.mean(errs)) < 0.1


def test_zero_steps_returns_seeded_initialization():
    m = TinyDenoiser(width=5, steps=0, seed=9).fit(np.ones((3, 4, 4)), schedule=SCHED)
    init = m._init_params()
    assert sorted(init) == sorted(m.params_)
    for k in init:
        assert np.array_equal(init[k], m.params_[k])
    assert m.n_train_steps_ == 0


def test_training_is_bit_reproducible():
    X = np.random.default_rng(3).uniform(-1, 1, (16, 6, 6))
    a = TinyDenoiser(width=4, steps=15, seed=4).fit(X, schedule=SCHED)
    b = TinyDenoiser(width=4, steps=15, seed=4).fit(X, schedule=SCHED)
    c = TinyDenoiser(width=4, steps=15, seed=5).fit(X, schedule=SCHED)
    assert all(a.params_[k].tobytes() == b.params_[k].tobytes() for k in a.params_)
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()
    assert a.final_loss_ == b.final_loss_ and np.isfinite(a.final_loss_)


def test_training_errors():
    with pytest.raises(ParameterError):
        train_predictor(np.zeros((0, 4, 4)), SCHED)
    with pytest.raises(ParameterError):
        TinyDenoiser(width=33, steps=1).fit(np.zeros((2, 4, 4)), schedule=SCHED)
    with pytest.raises(TrainingError):
        TinyDenoiser(steps=50, learning_rate=1e12, seed=0).fit(
            np.random.default_rng(0).standard_normal((8, 4, 4)) * 1e3, schedule=SCHED)


def test_save_load_roundtrip(tmp_path):
    X = np.random.default_rng(5).uniform(-1, 1, (8, 6, 6))
    m = TinyDenoiser(width=4, steps=5, seed=1).fit(X, schedule=SCHED)
    m.save(tmp_path / "p")
    r = TinyDenoiser.load(tmp_path / "p")
    x = np.random.default_rng(6).standard_normal((2, 6, 6))
    assert np.array_equal(m.predict_noise(x, 123, SCHED), r.predict_noise(x, 123, SCHED))
    assert r.describe() == m.describe()
    # tampering with a parameter file is caught by the stored hash
    w = (tmp_path / "p" / "conv1.w.dnft")
    w.write_bytes(encode_tensor(decode_tensor(w.read_bytes()) + 1))
    with pytest.raises(FormatError):
        TinyDenoiser.load(tmp_path / "p")


def test_denoiser_rejects_bad_input():
    with pytest.raises(ParameterError):
        _small.predict_noise(np.zeros((4, 4)), 0, SCHED)
    with pytest.raises(ValueError):
        _small.predict_noise(np.full((4, 4), np.nan), 3, SCHED)


# -- frame protocol -----------------------------------------------------------------

def test_serve_answers_requests_and_errors():
    x = np.arange(4, dtype=np.float32).reshape(2, 2)
    rfile = io.BytesIO(encode_request(5, x) + encode_request(0, x))
    wfile = io.BytesIO()
    serve(AnalyticGaussianPredictor(), SCHED, rfile, wfile)
    out = io.BytesIO(wfile.getvalue())
    assert out.readline() == HANDSHAKE
    assert out.read(1) == b"\x00"
    from dnfeat.formats import read_tensor_from
    eps = read_tensor_from(out)
    np.testing.assert_allclose(eps, analytic_predict(AnalyticGaussianPredictor(), x.astype(float), 5, SCHED), rtol=1e-6)
    assert out.read(1) == b"\x01"
    (n,) = struct.unpack("<I", out.read(4))
    assert b"ParameterError" in out.read(n)
    assert out.read() == b""


def test_echo_peer_is_bitwise_identity():
    x = np.random.default_rng(7).standard_normal((3, 5)).astype(np.float32)
    with ExternalPredictor(peer("--kind", "echo")) as p:
        assert external_predict(p, x, 10).tobytes() == x.astype(np.float64).tobytes()


def test_analytic_peer_matches_in_process_oracle():
    x = np.random.default_rng(8).standard_normal((4, 6, 6)).astype(np.float32).astype(np.float64)
    oracle = AnalyticGaussianPredictor(0.0, 1.0)
    with ExternalPredictor(peer("--kind", "analytic")) as p:
        for t in (1, 40, 500, 1000):
            np.testing.assert_allclose(p.predict_noise(x, t, SCHED), oracle.predict_noise(x, t, SCHED), atol=1e-6)


def test_peer_error_is_reported_and_connection_survives():
    with ExternalPredictor(peer("--kind", "analytic")) as p:
        with pytest.raises(TransportError, match="peer error"):
            p.predict_noise(np.zeros(2), 5000)
        assert p.predict_noise(np.zeros(2), 5).shape == (2,)


def test_wrong_shape_peer():
    with ExternalPredictor(peer("--kind", "badshape")) as p:
        with pytest.raises(TransportError, match="shape mismatch"):
            p.predict_noise(np.zeros((2, 3)), 1)


def test_exiting_peer_reports_stderr():
    with ExternalPredictor(peer("--kind", "exit")) as p:
        with pytest.raises(TransportError, match="peer giving up"):
            p.predict_noise(np.zeros(2), 1)
        with pytest.raises(TransportError):
            p.predict_noise(np.zeros(2), 1)


def test_hanging_peer_times_out():
    with ExternalPredictor(peer("--kind", "hang"), timeout_ms=500) as p:
        with pytest.raises(TransportError, match="timed out"):
            p.predict_noise(np.zeros(2), 1)


def test_bad_handshake_and_missing_command():
    with pytest.raises(TransportError, match="handshake"):
        ExternalPredictor([sys.executable, "-c", "print('HELLO 2')"], startup_timeout_ms=5000)
    with pytest.raises(TransportError):
        ExternalPredictor(["/nonexistent/peer-binary"])


def test_malformed_frame():
    script = "import sys; sys.stdout.buffer.write(b'DNFP 1\\n'); sys.stdout.flush(); sys.stdin.buffer.read(4); sys.stdout.buffer.write(b'\\x00JUNKJUNKJUNK'); sys.stdout.flush(); import time; time.sleep(5)"
    with ExternalPredictor([sys.executable, "-c", script], timeout_ms=2000) as p:
        with pytest.raises(TransportError, match="malformed|magic"):
            p.predict_noise(np.zeros(2), 1)


def test_concurrent_callers_are_serialized():
    oracle = AnalyticGaussianPredictor(0.0, 1.0)
    rng = np.random.default_rng(9)
    xs = [rng.standard_normal((4, 4)).astype(np.float32).astype(np.float64) for _ in range(16)]
    results = [None] * len(xs)
    with ExternalPredictor(peer("--kind", "analytic")) as p:
        def work(i):
            results[i] = p.predict_noise(xs[i], 10 + i, SCHED)
        threads = [threading.Thread(target=work, args=(i,)) for i in range(len(xs))]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    for i, x in enumerate(xs):
        np.testing.assert_allclose(results[i], oracle.predict_noise(x, 10 + i, SCHED), atol=1e-6)


def test_external_predictor_pickles_to_a_fresh_connection():
    with ExternalPredictor(peer("--kind", "analytic"), identity="oracle") as p:
        q = pickle.loads(pickle.dumps(p))
        try:
            x = np.ones((2, 2))
            assert np.array_equal(p.predict_noise(x, 3), q.predict_noise(x, 3))
            assert q.fingerprint() == p.fingerprint()
            assert q._proc.pid != p._proc.pid
        finally:
            q.close()
