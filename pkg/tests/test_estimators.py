import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from sigprop.apjn import backward_simplified, forward_extended
from sigprop.covariance import ModelHyper, run_trajectory
from sigprop.errors import DomainError
from sigprop.estimators import ApjnMeasurement, ApjnTheory, CovarianceExtractor
from sigprop.kernels import CovPair
from sigprop.simulator import generate_permutation_symmetric


@pytest.fixture(scope="module")
def tokens():
    return np.stack([generate_permutation_symmetric(1.0, p, 8, 32, seed=i).tokens for i, p in enumerate((0.2, 0.5))])


class TestCovarianceExtractor:
    def test_transform(self, tokens):
        out = CovarianceExtractor().fit_transform(tokens)
        assert out.shape == (2, 2)
        assert out[0] == pytest.approx((1.0, 0.2), abs=0.35)

    def test_single_matrix(self, tokens):
        assert CovarianceExtractor().fit(tokens).transform(tokens[0]).shape == (1, 2)

    def test_not_fitted(self, tokens):
        with pytest.raises(NotFittedError):
            CovarianceExtractor().transform(tokens)

    def test_width_mismatch(self, tokens):
        est = CovarianceExtractor().fit(tokens)
        with pytest.raises(ValueError):
            est.transform(tokens[..., :-1])

    @pytest.mark.parametrize("bad", [np.ones(4), np.ones((1, 1, 4)), np.full((2, 3, 4), np.nan)])
    def test_input_validation(self, bad):
        with pytest.raises(ValueError):
            CovarianceExtractor().fit(bad)


class TestApjnTheory:
    def test_params_roundtrip(self):
        est = ApjnTheory(blocks=5, phi="erf:1")
        params = est.get_params()
        assert params["blocks"] == 5 and params["phi"] == "erf:1"
        assert clone(est).set_params(blocks=7).blocks == 7

    def test_predict_matches_core(self):
        est = ApjnTheory(sigma_21=0.6, sigma_ov=0.3, phi="erf:1", blocks=6).fit([[1.0, 0.2]])
        ref = backward_simplified(run_trajectory(CovPair(1.0, 0.2), ModelHyper(0.3, 0.6, phi="erf:1"), 6))
        np.testing.assert_allclose(est.predict([[1.0, 0.2], [1.0, 0.2]])[1], ref.block_values)

    def test_extended_forward(self):
        est = ApjnTheory(context_n=8, direction="forward", extended=True, blocks=3).fit([[1.0, 0.2]])
        ref = forward_extended(run_trajectory(CovPair(1.0, 0.2), ModelHyper(0.31, 0.61, 8), 3))
        np.testing.assert_allclose(est.predict([[1.0, 0.2]])[0], ref.block_values)

    def test_bad_direction(self):
        with pytest.raises(ValueError):
            ApjnTheory(direction="up").fit([[1.0, 0.2]])

    def test_bad_hyper(self):
        with pytest.raises(DomainError):
            ApjnTheory(sigma_21=-1.0).fit([[1.0, 0.2]])

    def test_shape_checked(self):
        est = ApjnTheory().fit([[1.0, 0.2]])
        with pytest.raises(ValueError):
            est.predict([[1.0, 0.2, 0.3]])
        with pytest.raises(NotFittedError):
            ApjnTheory().predict([[1.0, 0.2]])

    def test_pipeline(self, tokens):
        pipe = Pipeline([("cov", CovarianceExtractor()), ("theory", ApjnTheory(blocks=4))])
        out = pipe.fit(tokens).predict(tokens)
        assert out.shape == (2, 5) and np.all(out[:, -1] == 1.0)
        assert clone(pipe).get_params()["theory__blocks"] == 4


class TestApjnMeasurement:
    def test_transform(self, tokens):
        est = ApjnMeasurement(blocks=2, n_probes=2, n_seeds=2)
        out = est.fit_transform(tokens)
        assert out.shape == (2, 3) and est.std_errors_.shape == (2, 3)
        assert np.all(out[:, -1] == 1.0)

    def test_final_norm(self, tokens):
        out = ApjnMeasurement(blocks=1, n_probes=2, n_seeds=1, final_norm=True).fit_transform(tokens[:1])
        assert out[0, -1] != 1.0

    def test_token_shape_checked(self, tokens):
        est = ApjnMeasurement(blocks=1).fit(tokens)
        with pytest.raises(ValueError):
            est.transform(tokens[:, :4])

    def test_reproducible(self, tokens):
        est = ApjnMeasurement(blocks=2, n_probes=2, n_seeds=2, seed=3)
        np.testing.assert_array_equal(est.fit_transform(tokens), clone(est).fit_transform(tokens))
