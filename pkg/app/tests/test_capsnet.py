import numpy as np
import pytest

from app.errors import ConfigurationError, DimensionError, DivisionGuardError
from models import ndcore
from models.capsnet import (
    POSE_DIM,
    CapsuleProjector,
    CapsuleSet,
    Encoder,
    EncoderConfig,
    SplitMLPProjector,
    encode,
    primary_capsules,
    RoutingLayerParams,
    coupling_coefficients,
    route_poses,
    self_routing_layer,
    spatial_average_pool,
    transform_votes,
)
from models.ndcore import Tensor, parameter


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def _loop_routing(poses, activations, w_route, w_pose):
    """Transcrição direta das fórmulas de self-routing com laços."""
    b_size, n_lower, _ = poses.shape
    n_upper = w_route.shape[2]
    out_poses = np.zeros((b_size, n_upper, POSE_DIM))
    out_acts = np.zeros((b_size, n_upper))
    for b in range(b_size):
        coupling = np.array([_softmax(w_route[i].T @ poses[b, i]) for i in range(n_lower)])
        for j in range(n_upper):
            out_acts[b, j] = sum(coupling[i, j] * activations[b, i] for i in range(n_lower)) / activations[b].sum()
            num = np.zeros(POSE_DIM)
            den = 0.0
            for i in range(n_lower):
                weight = coupling[i, j] * activations[b, i]
                num += weight * (w_pose[i, j] @ poses[b, i])
                den += weight
            out_poses[b, j] = num / den
    return out_poses, out_acts


def test_routing_matches_loop_oracle():
    """Testa o routing vetorizado contra a versão com laços em 100 instâncias"""
    rng = np.random.default_rng(0)
    with ndcore.precision(np.float64):
        for _ in range(100):
            n_lower = int(rng.integers(1, 17))
            n_upper = int(rng.integers(1, 9))
            params = RoutingLayerParams(n_lower, n_upper, rng)
            poses = rng.normal(size=(2, n_lower, POSE_DIM))
            acts = rng.uniform(0.05, 1.0, size=(2, n_lower))
            routed = self_routing_layer(CapsuleSet(Tensor(poses), Tensor(acts)), params)
            expected_poses, expected_acts = _loop_routing(poses, acts, params.w_route.data, params.w_pose.data)
            np.testing.assert_allclose(routed.poses.data, expected_poses, atol=1e-5)
            np.testing.assert_allclose(routed.activations.data, expected_acts, atol=1e-5)


def test_routed_activations_on_simplex():
    """Testa que as ativações roteadas somam 1 em 1000 passes aleatórios"""
    rng = np.random.default_rng(1)
    params = RoutingLayerParams(12, 6, rng)
    for _ in range(1000):
        poses = Tensor(rng.normal(size=(1, 12, POSE_DIM)))
        acts = Tensor(rng.uniform(0.0, 1.0, size=(1, 12)) + 1e-3)
        routed = self_routing_layer(CapsuleSet(poses, acts), params)
        assert abs(routed.activations.data.sum() - 1.0) < 1e-5


def test_routing_gradient_float64():
    """Testa gradientes de W_route, W_pose e das poses por diferenças centrais"""
    rng = np.random.default_rng(2)
    with ndcore.precision(np.float64):
        params = RoutingLayerParams(5, 3, rng)
        poses = parameter(rng.normal(size=(2, 5, POSE_DIM)))
        acts = parameter(rng.uniform(0.2, 1.0, size=(2, 5)))
        pose_weights = Tensor(rng.normal(size=(2, 3, POSE_DIM)))
        act_weights = Tensor(rng.normal(size=(2, 3)))

        def loss():
            routed = self_routing_layer(CapsuleSet(poses, acts), params)
            return (routed.poses * pose_weights).sum() + (routed.activations * act_weights).sum()

        loss().backward()
        for tensor in (params.w_route, params.w_pose, poses, acts):
            numeric = ndcore.numerical_gradient(loss, tensor, h=1e-6)
            assert ndcore.relative_error(tensor.grad, numeric) < 1e-3


def test_all_zero_activations_raise():
    """Testa DivisionGuardError quando todas as ativações inferiores são zero"""
    rng = np.random.default_rng(3)
    params = RoutingLayerParams(4, 2, rng)
    capsules = CapsuleSet(Tensor(rng.normal(size=(1, 4, POSE_DIM))), Tensor(np.zeros((1, 4))))
    with pytest.raises(DivisionGuardError):
        self_routing_layer(capsules, params)


def test_wrong_lower_count_raises():
    """Testa DimensionError quando o número de cápsulas inferiores não bate"""
    rng = np.random.default_rng(4)
    params = RoutingLayerParams(4, 2, rng)
    capsules = CapsuleSet(Tensor(rng.normal(size=(1, 3, POSE_DIM))), Tensor(np.ones((1, 3))))
    with pytest.raises(DimensionError):
        self_routing_layer(capsules, params)


def test_primary_capsules_layout():
    """Testa separação poses/ativações: canal n·16 + d vira a entrada d da cápsula n"""
    n_caps, h, w = 2, 3, 3
    head = np.arange(1 * n_caps * 17 * h * w, dtype=np.float64).reshape(1, n_caps * 17, h, w) / 100.0
    caps = primary_capsules(Tensor(head), n_caps)
    assert caps.poses.shape == (1, h * w * n_caps, POSE_DIM)
    assert caps.grid == (h, w, n_caps)
    # posição (1, 2), cápsula 1, entrada 5
    index = (1 * w + 2) * n_caps + 1
    assert caps.poses.data[0, index, 5] == pytest.approx(head[0, 1 * 16 + 5, 1, 2], rel=1e-6)
    assert np.all((caps.activations.data > 0) & (caps.activations.data < 1))


def test_primary_capsules_channel_mismatch():
    """Testa ConfigurationError para canais diferentes de N·17"""
    with pytest.raises(ConfigurationError):
        primary_capsules(Tensor(np.zeros((1, 30, 2, 2))), 2)


def test_spatial_pool_requires_grid():
    """Testa ConfigurationError ao fazer pooling sem grid"""
    caps = CapsuleSet(Tensor(np.zeros((1, 2, POSE_DIM))), Tensor(np.ones((1, 2))))
    with pytest.raises(ConfigurationError):
        spatial_average_pool(caps)


def test_encoder_declared_shape():
    """Testa que o mapa de saída tem a shape declarada pela configuração"""
    config = EncoderConfig(image_size=16, widths=(4, 8), kernel_sizes=(3, 3), strides=(2, 2))
    encoder = Encoder(config, np.random.default_rng(0))
    out = encode(Tensor(np.zeros((2, 3, 16, 16))), encoder)
    assert out.shape == (2,) + config.output_shape()
    assert config.output_shape() == (8, 4, 4)
    with pytest.raises(DimensionError):
        encode(Tensor(np.zeros((2, 3, 8, 8))), encoder)


def test_capsule_projector_output_shapes():
    """Testa shapes das cápsulas primárias e roteadas"""
    rng = np.random.default_rng(5)
    projector = CapsuleProjector((8, 2, 2), 3, rng)
    primary, routed = projector(Tensor(rng.normal(size=(4, 8, 2, 2))))
    assert primary.poses.shape == (4, 12, POSE_DIM)
    assert routed.pose_embedding().shape == (4, 3 * POSE_DIM)
    np.testing.assert_allclose(routed.activations.data.sum(axis=1), np.ones(4), atol=1e-5)


def test_split_mlp_projector():
    """Testa as duas cabeças do baseline e o erro de dimensão ímpar"""
    rng = np.random.default_rng(6)
    projector = SplitMLPProjector(8, 3, 32, rng, hidden=16)
    z_inv, z_equi = projector(Tensor(rng.normal(size=(5, 8))))
    assert z_inv.shape == (5, 3)
    assert z_equi.shape == (5, 32)
    with pytest.raises(ConfigurationError):
        SplitMLPProjector(7, 3, 32, rng)


def test_encode_single_image_has_no_batch_axis():
    """Testa que uma imagem C×H×W gera o mapa C_f×H_f×W_f sem eixo de batch"""
    config = EncoderConfig(image_size=8, widths=(4, 4, 4, 4))
    encoder = Encoder(config, np.random.default_rng(0))
    out = encode(np.zeros((3, 8, 8)), encoder)
    assert out.ndim == 3
    assert out.shape == config.output_shape()
    batched = encode(Tensor(np.ones((2, 3, 8, 8))), encoder)
    np.testing.assert_allclose(encode(np.ones((3, 8, 8)), encoder).data, batched.data[0], atol=1e-6)


def test_identity_pose_weights_repeat_poses():
    """Testa que W_pose identidade devolve a própria pose como voto para toda cápsula superior"""
    rng = np.random.default_rng(7)
    poses = rng.normal(size=(2, 4, POSE_DIM))
    w_pose = np.broadcast_to(np.eye(POSE_DIM), (4, 3, POSE_DIM, POSE_DIM)).copy()
    votes = transform_votes(Tensor(poses), Tensor(w_pose))
    assert votes.shape == (2, 4, 3, POSE_DIM)
    for j in range(3):
        np.testing.assert_allclose(votes.data[:, :, j, :], poses, atol=1e-5)


def test_routed_pose_inside_vote_envelope():
    """Testa que cada pose roteada fica entre o menor e o maior voto, coordenada a coordenada"""
    rng = np.random.default_rng(8)
    with ndcore.precision(np.float64):
        for _ in range(20):
            params = RoutingLayerParams(6, 3, rng)
            poses = Tensor(rng.normal(size=(2, 6, POSE_DIM)))
            acts = Tensor(rng.uniform(0.05, 1.0, size=(2, 6)))
            votes = transform_votes(poses, params.w_pose)
            coupling = coupling_coefficients(poses, params.w_route)
            routed = route_poses(votes, coupling, acts).data
            low = votes.data.min(axis=1)
            high = votes.data.max(axis=1)
            assert np.all(routed >= low - 1e-9)
            assert np.all(routed <= high + 1e-9)


def test_split_mlp_halves_are_independent():
    """Testa que z_inv depende só da metade esquerda e z_equi só da direita"""
    rng = np.random.default_rng(9)
    projector = SplitMLPProjector(8, 3, 32, rng, hidden=16)
    x = rng.normal(size=(4, 8))
    changed_right = x.copy()
    changed_right[:, 4:] = rng.normal(size=(4, 4))
    changed_left = x.copy()
    changed_left[:, :4] = rng.normal(size=(4, 4))
    z_inv, z_equi = projector(Tensor(x))
    z_inv_r, _ = projector(Tensor(changed_right))
    _, z_equi_l = projector(Tensor(changed_left))
    np.testing.assert_array_equal(z_inv.data, z_inv_r.data)
    np.testing.assert_array_equal(z_equi.data, z_equi_l.data)
    assert not np.allclose(z_inv.data, projector(Tensor(changed_left))[0].data)
