"""Preditor hipernetwork p_{ψ,g}.

Um único mapa linear leva o quaternion g (4 valores) a todos os blocos de um
MLP residual de duas camadas:

    out = z + W2 · relu(W1 · z + b1) + b2

Com o gerador zerado os blocos valem o bias do gerador; o bias de W2 e b2
começa em zero, então o preditor nasce como identidade.
"""
import numpy as np

from app.errors import ContractError, DimensionError, shape_mismatch
from models import ndcore
from models.layers import Module
from models.ndcore import parameter

G_DIM = 4
UNIT_TOL = 1e-4


class HyperPredictor(Module):
    """Parâmetros ψ do preditor.

    Os pesos do MLP residual saem de g: pesos = g · generator + generator_bias.
    O "gerador nulo" é o par generator = 0 e generator_bias = 0 (todos os
    pesos gerados nulos, saída = z_pose). Zerar só generator não basta: o
    bloco w1 de generator_bias é inicializado aleatoriamente.

    Args:
        dim (int): D, dimensão de Z_pose (N·16).
        rng (np.random.Generator): Gerador para a inicialização.
        hidden (int, optional): Largura da camada escondida (padrão: D).
        init_std (float): Desvio da matriz geradora.
    """

    def __init__(self, dim, rng, hidden=None, init_std=1e-3):
        self.dim = int(dim)
        self.hidden = int(hidden or dim)
        self.block_shapes = {
            "w1": (self.dim, self.hidden),
            "b1": (self.hidden,),
            "w2": (self.hidden, self.dim),
            "b2": (self.dim,),
        }
        self.block_offsets = {}
        offset = 0
        for name, shape in self.block_shapes.items():
            size = int(np.prod(shape))
            self.block_offsets[name] = (offset, offset + size)
            offset += size
        self.n_generated = offset

        bias = np.zeros(self.n_generated)
        start, stop = self.block_offsets["w1"]
        bias[start:stop] = rng.normal(0.0, 1.0 / np.sqrt(self.dim), size=stop - start)
        self.generator = parameter(rng.normal(0.0, init_std, size=(G_DIM, self.n_generated)))
        self.generator_bias = parameter(bias)

    def forward(self, z_pose, g):
        return predict(z_pose, g, self)


def _quaternion_batch(g):
    if hasattr(g, "as_array"):
        g = g.as_array()
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    if g.shape[-1] != G_DIM:
        raise DimensionError(f"quaternion com {g.shape[-1]} componentes")
    norms = np.linalg.norm(g, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError(f"preditor exige quaternions unitários (normas em [{norms.min():.6f}, {norms.max():.6f}])")
    return g


def generate_weights(g, params):
    """Blocos do MLP gerados linearmente a partir de g.

    Args:
        g: Quaternion, array (4,) ou batch (B, 4).
        params (HyperPredictor): Gerador.

    Returns:
        dict[str, Tensor]: w1 (B×D×H), b1 (B×H), w2 (B×H×D), b2 (B×D).

    Raises:
        ContractError: Quaternion não unitário.
    """
    g = _quaternion_batch(g)
    b = g.shape[0]
    flat = ndcore.matmul(ndcore.Tensor(g), params.generator) + params.generator_bias
    blocks = {}
    for name, shape in params.block_shapes.items():
        start, stop = params.block_offsets[name]
        blocks[name] = flat[:, start:stop].reshape((b,) + shape)
    return blocks


def predict(z_pose, g, params):
    """Aplica, linha a linha, o MLP gerado por g_i em Z_pose[i].

    Raises:
        DimensionError: Batch de poses e de quaternions diferentes, ou D incompatível.
        ContractError: Quaternion não unitário.
    """
    z_pose = ndcore.as_tensor(z_pose)
    g = _quaternion_batch(g)
    if z_pose.ndim != 2 or z_pose.shape[1] != params.dim:
        raise shape_mismatch("predict", z_pose.shape, (None, params.dim))
    if z_pose.shape[0] != g.shape[0]:
        raise DimensionError(f"predict: {z_pose.shape[0]} poses para {g.shape[0]} quaternions")
    blocks = generate_weights(g, params)
    hidden = (ndcore.einsum("bd,bdh->bh", z_pose, blocks["w1"]) + blocks["b1"]).relu()
    return z_pose + ndcore.einsum("bh,bhd->bd", hidden, blocks["w2"]) + blocks["b2"]
