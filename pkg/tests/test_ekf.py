import numpy as np
import pytest

from cle_ekf import ekf
from cle_ekf.crn import Reaction, SpeciesValue, build_crn, propensities
from cle_ekf.errors import ConfigError, NumericalError
from cle_ekf.sim import MeasurementModel, measure, simulate


def linear_crn():
    """Birth, conversion and decay: affine propensities, so F is constant."""
    return build_crn(["A", "B"], [
        (Reaction(4.0, ()), {"A": 1}),
        (Reaction(0.3, (SpeciesValue(0),)), {"A": -1, "B": 1}),
        (Reaction(0.2, (SpeciesValue(1),)), {"B": -1}),
    ])


def spd(rng, n, scale=1.0):
    M = rng.standard_normal((n, n))
    return scale * (M @ M.T + n * np.eye(n))


def linear_kf_oracle(x0, P0, ys, delta, C, R):
    """Hand-written affine Kalman filter with Joseph-form covariance update."""
    V = np.array([[1.0, -1.0, 0.0], [0.0, 1.0, -1.0]])
    c = np.array([4.0, 0.0, 0.0])
    K_a = np.array([[0.0, 0.0], [0.3, 0.0], [0.0, 0.2]])
    F = np.eye(2) + delta * V @ K_a
    x, P = np.array(x0, float), np.array(P0, float)
    out = []
    for y in ys:
        a = c + K_a @ x
        Q = delta * V @ np.diag(a) @ V.T
        x, P = F @ x + delta * V @ c, F @ P @ F.T + Q
        S = C @ P @ C.T + R
        K = P @ C.T @ np.linalg.inv(S)
        x = x + K @ (y - C @ x)
        IKC = np.eye(2) - K @ C
        P = IKC @ P @ IKC.T + K @ R @ K.T
        out.append((x.copy(), P.copy()))
    return out


class TestProcessNoise:
    def test_zero_propensities(self):
        crn = build_crn(["a"], [(Reaction(0.0, ()), {"a": 1})])
        np.testing.assert_array_equal(ekf.process_noise_cov(crn, [2.0], 0.1), [[0.0]])

    def test_birth_death(self, birth_death):
        np.testing.assert_allclose(ekf.process_noise_cov(birth_death, [50.0], 0.01), [[0.15]], rtol=1e-12)

    def test_dense_oracle(self, gene, rng):
        for _ in range(50):
            x = rng.uniform(0, 20, size=4)
            expected = 5e-4 * gene.V @ np.diag(propensities(gene, x)) @ gene.V.T
            Q = ekf.process_noise_cov(gene, x, 5e-4)
            np.testing.assert_allclose(Q, expected, rtol=1e-12, atol=1e-12 * np.abs(expected).max())
            assert np.array_equal(Q, Q.T)
            assert np.linalg.eigvalsh(Q).min() >= -1e-12

    def test_scaled_by_Q0(self, birth_death):
        np.testing.assert_allclose(ekf.process_noise_cov(birth_death, [50.0], 0.01, Q0=2 * np.eye(2)), [[0.3]])


class TestPredict:
    def test_identity_dynamics(self):
        crn = build_crn(["a", "b"], [(Reaction(0.0, (SpeciesValue(0),)), {"a": 1})])
        P = np.array([[2.0, 0.5], [0.5, 1.0]])
        mean, cov, F, Q = ekf.predict_arrays(crn, [1.0, 2.0], P, 0.1)
        np.testing.assert_array_equal(mean, [1.0, 2.0])
        np.testing.assert_array_equal(cov, P)
        np.testing.assert_array_equal(F, np.eye(2))

    def test_vanishing_step(self, gene, rng):
        x = rng.uniform(1, 9, size=4)
        P = spd(rng, 4)
        mean, cov, _, _ = ekf.predict_arrays(gene, x, P, 1e-12)
        np.testing.assert_allclose(mean, x, atol=1e-9)
        np.testing.assert_allclose(cov, P, atol=1e-9)

    def test_analytic_jacobian_matches_fd(self, gene, rng):
        for _ in range(10):
            x = rng.uniform(1, 9, size=4)
            np.testing.assert_allclose(ekf.drift_jacobian(gene, x, 0.01),
                                       ekf.drift_jacobian(gene, x, 0.01, method="fd"), rtol=1e-6, atol=1e-9)

    def test_unknown_jacobian_method(self, gene):
        with pytest.raises(ConfigError):
            ekf.drift_jacobian(gene, np.ones(4), 0.1, method="magic")

    def test_covariance_stays_symmetric_psd(self, gene, rng):
        for _ in range(20):
            _, cov, _, _ = ekf.predict_arrays(gene, rng.uniform(0, 20, size=4), spd(rng, 4), 5e-4)
            assert np.array_equal(cov, cov.T)
            assert np.linalg.eigvalsh(cov).min() > 0


class TestCorrect:
    def test_equal_prior_and_noise(self):
        model = MeasurementModel(np.eye(2), np.eye(2))
        rec = ekf.correct(np.zeros(2), np.eye(2), np.array([2.0, -4.0]), model)
        np.testing.assert_allclose(rec.gain, 0.5 * np.eye(2), rtol=1e-15)
        np.testing.assert_allclose(rec.posterior.mean, [1.0, -2.0])
        np.testing.assert_allclose(rec.posterior.cov, 0.5 * np.eye(2))

    def test_uninformative_measurement(self, rng):
        prior, P = rng.standard_normal(3), spd(rng, 3)
        model = MeasurementModel(np.eye(3), 1e9 * np.eye(3))
        rec = ekf.correct(prior, P, rng.standard_normal(3), model)
        np.testing.assert_allclose(rec.posterior.mean, prior, atol=1e-6)
        np.testing.assert_allclose(rec.posterior.cov, P, rtol=1e-6)

    def test_gain_forms_agree(self, rng):
        for _ in range(200):
            n, p = rng.integers(1, 6), rng.integers(1, 4)
            model = MeasurementModel(rng.standard_normal((p, n)), spd(rng, p))
            rec = ekf.correct(rng.standard_normal(n), spd(rng, n), rng.standard_normal(p), model)
            info = ekf.information_gain(rec.posterior.cov, model.C, model.R)
            assert np.linalg.norm(rec.gain - info) <= 1e-8 * np.linalg.norm(rec.gain)

    def test_posterior_covariance_does_not_grow(self, rng):
        for _ in range(50):
            P = spd(rng, 4)
            model = MeasurementModel(rng.standard_normal((2, 4)), spd(rng, 2))
            rec = ekf.correct(np.zeros(4), P, np.zeros(2), model)
            assert np.linalg.eigvalsh(P - rec.posterior.cov).min() >= -1e-10

    def test_measurement_shape(self):
        model = MeasurementModel(np.eye(2), np.eye(2))
        with pytest.raises(ConfigError):
            ekf.correct(np.zeros(2), np.eye(2), np.zeros(3), model)


class TestRun:
    def test_no_measurements(self, gene):
        model = MeasurementModel(np.eye(4), np.eye(4))
        assert ekf.run(gene, np.zeros((0, 4)), model, np.ones(4), np.eye(4), 0.1) == []

    def test_linear_network_matches_kalman_filter(self, rng):
        crn = linear_crn()
        C = np.array([[0.0, 1.0]])
        R = np.array([[2.0]])
        traj = simulate(crn, [10.0, 5.0], 0.05, 1000, seed=3)
        series = measure(traj, MeasurementModel(C, R), seed=3)
        records = ekf.run(crn, series, MeasurementModel(C, R), [12.0, 3.0], 4 * np.eye(2), 0.05)
        oracle = linear_kf_oracle([12.0, 3.0], 4 * np.eye(2), series.values, 0.05, C, R)
        for rec, (x, P) in zip(records, oracle):
            np.testing.assert_allclose(rec.posterior.mean, x, rtol=1e-10, atol=1e-10)
            np.testing.assert_allclose(rec.posterior.cov, P, rtol=1e-10, atol=1e-10)

    def test_noise_free_tracking(self, birth_death):
        model = MeasurementModel(np.eye(1), np.eye(1))
        traj = simulate(birth_death, [60.0], 0.05, 2000, 0, noise=False)
        series = measure(traj, model, 0, noise=False)
        records = ekf.run(birth_death, series, model, [90.0], 100 * np.eye(1), 0.05)
        assert abs(records[-1].posterior.mean[0] - traj.states[-1, 0]) < 0.01 * 30.0

    def test_records_carry_F_and_Q(self, birth_death):
        model = MeasurementModel(np.eye(1), np.eye(1))
        rec = ekf.run(birth_death, [[50.0]], model, [50.0], np.eye(1), 0.01)[0]
        np.testing.assert_allclose(rec.Q, [[0.15]])
        np.testing.assert_allclose(rec.F, [[1 - 0.001]])
        assert rec.posterior.step == 1

    def test_singular_innovation_covariance(self):
        with pytest.raises(NumericalError):
            ekf.correct_arrays(np.zeros(2), np.zeros((2, 2)), np.zeros(2), np.eye(2), np.zeros((2, 2)))

    def test_initial_shape_mismatch(self, gene):
        model = MeasurementModel(np.eye(4), np.eye(4))
        with pytest.raises(ConfigError):
            ekf.run(gene, np.zeros((3, 4)), model, np.ones(3), np.eye(3), 0.1)


class TestRecordDump:
    def test_round_trip(self, gene, tmp_path):
        model = MeasurementModel(np.eye(4)[[1, 3]], np.diag([12.5, 12.5]))
        traj = simulate(gene, [10.0, 0.0, 20.0, 0.0], 5e-4, 20, 1)
        records = ekf.run(gene, measure(traj, model, 1), model, [7.0, 3.0, 17.0, 3.0], 10 * np.eye(4), 5e-4)
        path = tmp_path / "records.bin"
        ekf.write_records(path, records, gene.m)
        again = ekf.read_records(path)
        assert len(again) == 20
        for a, b in zip(records, again):
            assert a.posterior.step == b.posterior.step
            for field in ("prior_mean", "prior_cov", "gain", "innovation", "Q", "F"):
                np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
            np.testing.assert_array_equal(a.posterior.cov, b.posterior.cov)
            np.testing.assert_array_equal(a.posterior.mean, b.posterior.mean)

    def test_header(self, birth_death, tmp_path):
        model = MeasurementModel(np.eye(1), np.eye(1))
        records = ekf.run(birth_death, [[50.0], [51.0]], model, [50.0], np.eye(1), 0.01)
        path = tmp_path / "r.bin"
        ekf.write_records(path, records, birth_death.m)
        raw = path.read_bytes()
        assert raw[:8] == ekf.RECORD_MAGIC
        assert np.frombuffer(raw[8:20], "<u4").tolist() == [1, 2, 1]
        assert np.frombuffer(raw[20:28], "<u8")[0] == 2

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTMAGIC" + bytes(20))
        with pytest.raises(ConfigError):
            ekf.read_records(path)
