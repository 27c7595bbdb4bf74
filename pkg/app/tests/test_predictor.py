import numpy as np
import pytest

from app.errors import ContractError, DimensionError
from app.services.rotations_service import Quaternion, sample_rotation
from models import ndcore
from models.ndcore import Tensor, parameter
from models.predictor import HyperPredictor, generate_weights, predict


@pytest.fixture
def rng():
    """Gerador com semente fixa"""
    return np.random.default_rng(0)


def _unit_batch(rng, n):
    return np.stack([sample_rotation(rng)[1].as_array() for _ in range(n)])


def test_zero_generator_is_identity(rng):
    """Testa que gerador e bias zerados fazem o preditor devolver a entrada"""
    params = HyperPredictor(8, rng)
    params.generator.data[:] = 0.0
    params.generator_bias.data[:] = 0.0
    z = rng.normal(size=(3, 8))
    out = predict(Tensor(z), _unit_batch(rng, 3), params)
    np.testing.assert_allclose(out.data, z, atol=1e-6)


def test_generated_block_shapes(rng):
    """Testa shapes dos blocos W1, b1, W2, b2 gerados por g"""
    params = HyperPredictor(8, rng, hidden=5)
    blocks = generate_weights(_unit_batch(rng, 2), params)
    assert blocks["w1"].shape == (2, 8, 5)
    assert blocks["b1"].shape == (2, 5)
    assert blocks["w2"].shape == (2, 5, 8)
    assert blocks["b2"].shape == (2, 8)
    assert params.generator.shape == (4, params.n_generated)


def test_output_depends_on_rotation(rng):
    """Testa que rotações diferentes geram predições diferentes"""
    params = HyperPredictor(8, rng, init_std=0.5)
    z = np.repeat(rng.normal(size=(1, 8)), 2, axis=0)
    out = predict(Tensor(z), _unit_batch(rng, 2), params)
    assert not np.allclose(out.data[0], out.data[1])


def test_single_quaternion_accepted(rng):
    """Testa entrada com um único Quaternion"""
    params = HyperPredictor(8, rng)
    out = params(Tensor(rng.normal(size=(1, 8))), Quaternion.identity())
    assert out.shape == (1, 8)


def test_non_unit_quaternion_rejected(rng):
    """Testa ContractError para g não unitário"""
    params = HyperPredictor(8, rng)
    with pytest.raises(ContractError):
        predict(Tensor(np.zeros((1, 8))), np.array([[2.0, 0.0, 0.0, 0.0]]), params)


def test_batch_and_dimension_mismatch(rng):
    """Testa DimensionError para batch ou D incompatíveis"""
    params = HyperPredictor(8, rng)
    with pytest.raises(DimensionError):
        predict(Tensor(np.zeros((2, 8))), _unit_batch(rng, 3), params)
    with pytest.raises(DimensionError):
        predict(Tensor(np.zeros((2, 6))), _unit_batch(rng, 2), params)


def test_predictor_gradient_float64(rng):
    """Testa gradiente do gerador e da entrada por diferenças centrais"""
    with ndcore.precision(np.float64):
        params = HyperPredictor(4, rng, hidden=3, init_std=0.3)
        z = parameter(rng.normal(size=(2, 4)))
        g = _unit_batch(rng, 2)
        target = Tensor(rng.normal(size=(2, 4)))

        def loss():
            diff = predict(z, g, params) - target
            return (diff * diff).sum()

        loss().backward()
        for tensor in (params.generator, params.generator_bias, z):
            numeric = ndcore.numerical_gradient(loss, tensor, h=1e-6)
            assert ndcore.relative_error(tensor.grad, numeric) < 1e-3


def test_zeroing_generator_alone_keeps_random_w1(rng):
    """Testa que só zerar generator deixa W1 aleatório (vem de generator_bias)"""
    params = HyperPredictor(8, rng, hidden=5)
    params.generator.data[:] = 0.0
    blocks = generate_weights(_unit_batch(rng, 2), params)
    assert np.abs(blocks["w1"].data).max() > 0.0
    np.testing.assert_allclose(blocks["w1"].data[0], blocks["w1"].data[1])
    np.testing.assert_allclose(blocks["w2"].data, 0.0)
