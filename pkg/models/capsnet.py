"""Encoder convolucional, cápsulas primárias e a camada de self-routing.

Convenções de shape (batch sempre na frente):
    poses        B × L × 16   (pose 4×4 achatada)
    ativações    B × L
    coupling c   B × L × J
    votos û      B × L × J × 16
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from app.errors import ConfigurationError, DimensionError, DivisionGuardError, shape_mismatch
from models import ndcore
from models.layers import MLP, Conv2d, Module
from models.ndcore import parameter

POSE_DIM = 16
ROUTING_EPS = 1e-8


# ============================================================
#  Encoder
# ============================================================
@dataclass
class EncoderConfig:
    """Encoder conv de 4 estágios (substituto de mesa da ResNet-18).

    Padding = kernel // 2 em todos os estágios.
    """

    in_channels: int = 3
    image_size: int = 32
    widths: tuple = (32, 64, 128, 128)
    kernel_sizes: tuple = (3, 3, 3, 3)
    strides: tuple = (1, 2, 2, 2)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.strides = tuple(int(s) for s in self.strides)
        if not len(self.widths) == len(self.kernel_sizes) == len(self.strides) or not self.widths:
            raise ConfigurationError(
                f"EncoderConfig: widths/kernel_sizes/strides com tamanhos diferentes "
                f"({len(self.widths)}, {len(self.kernel_sizes)}, {len(self.strides)})"
            )
        if self.output_shape()[1] < 1:
            raise ConfigurationError(f"EncoderConfig: saída espacial vazia para imagem {self.image_size}")

    def output_shape(self):
        """(C_f, H_f, W_f) declarado para a configuração."""
        size = self.image_size
        for k, s in zip(self.kernel_sizes, self.strides):
            size = (size + 2 * (k // 2) - k) // s + 1
        return self.widths[-1], size, size

    def to_dict(self):
        data = asdict(self)
        return {key: list(value) if isinstance(value, tuple) else value for key, value in data.items()}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class Encoder(Module):
    def __init__(self, config, rng):
        self.config = config
        channels = [config.in_channels] + list(config.widths)
        self.stages = [
            Conv2d(c_in, c_out, k, rng, stride=s, padding=k // 2)
            for c_in, c_out, k, s in zip(channels[:-1], channels[1:], config.kernel_sizes, config.strides)
        ]

    def forward(self, images):
        return encode(images, self)


def encode(images, encoder):
    """Imagem(ns) C×H×W ou B×C×H×W -> mapa de features C_f×H_f×W_f (com batch se houver).

    Raises:
        DimensionError: Shape da imagem diferente da configuração.
    """
    images = ndcore.as_tensor(images)
    cfg = encoder.config
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if images.shape[-3:] != expected or images.ndim not in (3, 4):
        raise shape_mismatch("encode", images.shape, expected)
    single = images.ndim == 3
    x = images.reshape((1,) + images.shape) if single else images
    for stage in encoder.stages:
        x = stage(x).relu()
    return x.reshape(x.shape[1:]) if single else x


def global_average_pool(feature_map):
    """B×C×H×W -> B×C (a "representação" do encoder)."""
    return feature_map.mean(axis=(2, 3))


# ============================================================
#  Cápsulas
# ============================================================
@dataclass
class CapsuleSet:
    """Poses (B×L×16) e ativações (B×L) de uma camada de cápsulas.

    `grid` = (H, W, N) quando as cápsulas vêm de um mapa espacial; a ordem das
    L = H·W·N cápsulas é posição-major (linha, coluna, cápsula).
    """

    poses: ndcore.Tensor
    activations: ndcore.Tensor
    grid: tuple = field(default=None)

    @property
    def batch_size(self):
        return self.poses.shape[0]

    @property
    def n_caps(self):
        return self.poses.shape[1]

    def pose_embedding(self):
        """B × (N·16)."""
        return self.poses.reshape(self.batch_size, self.n_caps * POSE_DIM)

    def activation_embedding(self):
        return self.activations


def primary_capsules(head_map, n_caps):
    """Separa o mapa das cabeças 1×1 em poses e ativações.

    Os primeiros N·16 canais são poses (canal n·16 + d = entrada d da cápsula n);
    os N últimos são logits de ativação, que passam por sigmoid.

    Args:
        head_map (Tensor): B × (N·16 + N) × H × W.
        n_caps (int): Cápsulas por posição.

    Returns:
        CapsuleSet: Grid com H·W·N cápsulas.

    Raises:
        ConfigurationError: Número de canais diferente de N·17.
    """
    head_map = ndcore.as_tensor(head_map)
    if head_map.ndim != 4 or head_map.shape[1] != n_caps * (POSE_DIM + 1):
        raise ConfigurationError(
            f"primary_capsules: esperados {n_caps * (POSE_DIM + 1)} canais para {n_caps} cápsulas, "
            f"recebeu shape {head_map.shape}"
        )
    b, _, h, w = head_map.shape
    pose_channels = head_map[:, : n_caps * POSE_DIM]
    act_channels = head_map[:, n_caps * POSE_DIM:]
    poses = pose_channels.transpose(0, 2, 3, 1).reshape(b, h * w * n_caps, POSE_DIM)
    activations = act_channels.transpose(0, 2, 3, 1).reshape(b, h * w * n_caps).sigmoid()
    return CapsuleSet(poses=poses, activations=activations, grid=(h, w, n_caps))


class PrimaryCapsules(Module):
    """Conv 1×1 para as N·16 poses em paralelo com conv 1×1 + sigmoid para as N ativações."""

    def __init__(self, in_channels, n_caps, rng):
        self.n_caps = n_caps
        self.pose_head = Conv2d(in_channels, n_caps * POSE_DIM, 1, rng)
        self.activation_head = Conv2d(in_channels, n_caps, 1, rng)

    def forward(self, feature_map):
        head_map = ndcore.concat([self.pose_head(feature_map), self.activation_head(feature_map)], axis=1)
        return primary_capsules(head_map, self.n_caps)


def spatial_average_pool(capsules):
    """Média de poses e ativações de cada cápsula sobre as posições do grid.

    Raises:
        ConfigurationError: Conjunto sem grid ou grid vazio.
    """
    if capsules.grid is None or capsules.grid[0] * capsules.grid[1] * capsules.grid[2] == 0:
        raise ConfigurationError("spatial_average_pool: grid de cápsulas vazio")
    h, w, n = capsules.grid
    b = capsules.batch_size
    poses = capsules.poses.reshape(b, h * w, n, POSE_DIM).mean(axis=1)
    activations = capsules.activations.reshape(b, h * w, n).mean(axis=1)
    return CapsuleSet(poses=poses, activations=activations, grid=(1, 1, n))


# ============================================================
#  Self-routing
# ============================================================
class RoutingLayerParams(Module):
    """W_route (L × 16 × J) e W_pose (L × J × 16 × 16) de uma camada de routing.

    O conjunto Ω_l das L cápsulas inferiores é fixo na construção.
    """

    def __init__(self, n_lower, n_upper, rng, pose_dim=POSE_DIM):
        self.n_lower = int(n_lower)
        self.n_upper = int(n_upper)
        self.pose_dim = int(pose_dim)
        scale = 1.0 / np.sqrt(pose_dim)
        self.w_route = parameter(rng.normal(0.0, scale, size=(n_lower, pose_dim, n_upper)))
        self.w_pose = parameter(rng.normal(0.0, scale, size=(n_lower, n_upper, pose_dim, pose_dim)))


def coupling_coefficients(poses, w_route):
    """c_ij = softmax_j(W_route_iᵀ u_i).

    Raises:
        DimensionError: Dimensão de pose diferente das linhas de W_route.
        NumericError: Logits não finitos.
    """
    poses, w_route = ndcore.as_tensor(poses), ndcore.as_tensor(w_route)
    if poses.ndim != 3 or w_route.ndim != 3 or poses.shape[1:] != w_route.shape[:2]:
        raise shape_mismatch("coupling_coefficients", poses.shape, w_route.shape)
    logits = ndcore.einsum("bid,idj->bij", poses, w_route)
    return ndcore.softmax(logits, axis=-1)


def _guard_denominator(values, op):
    if np.any(values == 0):
        raise DivisionGuardError(f"{op}: denominador exatamente zero")


def route_activations(activations, coupling):
    """a_j = Σ_i c_ij a_i / Σ_i a_i (soma 1 sobre j).

    Raises:
        DivisionGuardError: Todas as ativações inferiores de uma amostra são zero.
    """
    activations, coupling = ndcore.as_tensor(activations), ndcore.as_tensor(coupling)
    if coupling.shape[:2] != activations.shape:
        raise shape_mismatch("route_activations", activations.shape, coupling.shape)
    total = activations.sum(axis=1, keepdims=True)
    _guard_denominator(total.data, "route_activations")
    weighted = ndcore.einsum("bi,bij->bj", activations, coupling)
    return weighted / total.clamp_min(ROUTING_EPS)


def transform_votes(poses, w_pose):
    """û_{j|i} = W_pose_ij · u_i para todos os pares (i, j).

    Raises:
        DimensionError: Shapes de poses e W_pose incompatíveis.
    """
    poses, w_pose = ndcore.as_tensor(poses), ndcore.as_tensor(w_pose)
    if (poses.ndim != 3 or w_pose.ndim != 4 or poses.shape[1] != w_pose.shape[0]
            or poses.shape[2] != w_pose.shape[3]):
        raise shape_mismatch("transform_votes", poses.shape, w_pose.shape)
    return ndcore.einsum("ijde,bie->bijd", w_pose, poses)


def route_poses(votes, coupling, activations):
    """u_j = Σ_i c_ij a_i û_{j|i} / Σ_i c_ij a_i (média ponderada dos votos).

    Raises:
        DivisionGuardError: Peso total zero para alguma cápsula superior.
    """
    votes, coupling = ndcore.as_tensor(votes), ndcore.as_tensor(coupling)
    activations = ndcore.as_tensor(activations)
    if votes.shape[:3] != coupling.shape or coupling.shape[:2] != activations.shape:
        raise shape_mismatch("route_poses", votes.shape, coupling.shape)
    b, _, j = coupling.shape
    weights = coupling * activations.reshape(b, activations.shape[1], 1)
    total = weights.sum(axis=1)
    _guard_denominator(total.data, "route_poses")
    weighted = ndcore.einsum("bij,bijd->bjd", weights, votes)
    return weighted / total.clamp_min(ROUTING_EPS).reshape(b, j, 1)


def self_routing_layer(capsules, params):
    """Camada de self-routing não iterativa.

    Raises:
        DimensionError: Número de cápsulas inferiores diferente de |Ω_l|.
    """
    if capsules.n_caps != params.n_lower:
        raise DimensionError(
            f"self_routing_layer: {capsules.n_caps} cápsulas inferiores, parâmetros esperam {params.n_lower}"
        )
    coupling = coupling_coefficients(capsules.poses, params.w_route)
    activations = route_activations(capsules.activations, coupling)
    votes = transform_votes(capsules.poses, params.w_pose)
    poses = route_poses(votes, coupling, capsules.activations)
    return CapsuleSet(poses=poses, activations=activations)


class CapsuleProjector(Module):
    """Cápsulas primárias sobre o mapa do encoder + uma camada de routing para N cápsulas."""

    def __init__(self, feature_shape, n_caps, rng, n_upper=None):
        channels, h, w = feature_shape
        self.n_caps = n_caps
        self.primary = PrimaryCapsules(channels, n_caps, rng)
        self.routing = RoutingLayerParams(h * w * n_caps, n_upper or n_caps, rng)

    def forward(self, feature_map):
        primary = self.primary(feature_map)
        return primary, self_routing_layer(primary, self.routing)


class CapsuleClassHead(CapsuleProjector):
    """Cabeça de classificação: as ativações das K cápsulas de classe são os scores."""

    def __init__(self, feature_shape, n_caps, num_classes, rng):
        super().__init__(feature_shape, n_caps, rng, n_upper=num_classes)

    def forward(self, feature_map):
        _, routed = super().forward(feature_map)
        return routed.activations


# ============================================================
#  Baseline split-MLP
# ============================================================
class SplitMLPProjector(Module):
    """Duas cabeças MLP independentes, uma para cada metade da representação.

    Raises:
        ConfigurationError: Dimensão da representação ímpar.
    """

    def __init__(self, rep_dim, inv_dim, equi_dim, rng, hidden=512):
        if rep_dim % 2:
            raise ConfigurationError(f"SplitMLPProjector: dimensão {rep_dim} não divide em duas metades")
        self.half = rep_dim // 2
        self.inv_head = MLP([self.half, hidden, inv_dim], rng)
        self.equi_head = MLP([self.half, hidden, equi_dim], rng)

    def forward(self, representation):
        return split_mlp_projector(representation, self)


def split_mlp_projector(representation, projector):
    """(z_inv, z_equi): metade esquerda -> cabeça invariante, direita -> equivariante."""
    representation = ndcore.as_tensor(representation)
    if representation.ndim != 2 or representation.shape[1] != 2 * projector.half:
        raise shape_mismatch("split_mlp_projector", representation.shape, (None, 2 * projector.half))
    left = representation[:, : projector.half]
    right = representation[:, projector.half:]
    return projector.inv_head(left), projector.equi_head(right)
