import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from app.errors import ContractError, ParameterError, shape_mismatch
from models import ndcore

SIMPLEX_TOL = 1e-4
VAR_EPS = 1e-8


# ============================================================
#  Tipos
# ============================================================
@dataclass(frozen=True)
class LossWeights:
    """Pesos da loss composta (padrões do protocolo de pré-treino)."""

    inv: float = 0.1
    equi: float = 5.0
    var: float = 10.0
    cov: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise ParameterError(f"LossWeights.{f.name}={value}: pesos devem ser finitos e >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    """Cada termo da loss (Tensors escalares) e o total ponderado."""

    invariant_ce: ndcore.Tensor
    mean_entropy_a: ndcore.Tensor
    mean_entropy_b: ndcore.Tensor
    equivariant_mse: ndcore.Tensor
    var_reg_a: ndcore.Tensor
    var_reg_b: ndcore.Tensor
    cov_reg_a: ndcore.Tensor
    cov_reg_b: ndcore.Tensor
    predictor_var_reg: ndcore.Tensor
    total: ndcore.Tensor

    def as_dict(self):
        return {f.name: getattr(self, f.name).item() for f in fields(self)}

    def recompute_total(self, weights):
        """Remonta o total a partir dos componentes (em float64)."""
        v = self.as_dict()
        return (
            weights.inv * v["invariant_ce"]
            - (v["mean_entropy_a"] + v["mean_entropy_b"])
            + weights.equi * v["equivariant_mse"]
            + weights.cov * v["cov_reg_a"] + weights.var * v["var_reg_a"]
            + weights.cov * v["cov_reg_b"] + weights.var * v["var_reg_b"]
            + weights.var * v["predictor_var_reg"]
        )


# ============================================================
#  Termos invariantes
# ============================================================
def check_simplex(z, name="Z_act"):
    """Cada linha deve ser um vetor de probabilidades (soma 1 ± 1e-4).

    Raises:
        ContractError: Linha fora do simplex.
    """
    data = ndcore.as_tensor(z).data
    sums = data.sum(axis=-1, dtype=np.float64)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL) or np.any(data < -SIMPLEX_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ContractError(f"{name}: linhas fora do simplex (maior desvio da soma = {worst:.2e})")


def _cross_entropy(p, q):
    return -(p * ndcore.safe_log(q)).sum(axis=1).mean()


def invariant_loss(z_act_a, z_act_b, symmetric=True):
    """Entropia cruzada entre os vetores de ativação das duas vistas.

    Por padrão simetrizada: (H(Z, Z') + H(Z', Z)) / 2. Com symmetric=False
    devolve apenas H(Z, Z') = -(1/B) Σ Z log Z'.

    Raises:
        DimensionError: Shapes diferentes.
        ContractError: Linha fora do simplex.
    """
    z_act_a, z_act_b = ndcore.as_tensor(z_act_a), ndcore.as_tensor(z_act_b)
    if z_act_a.shape != z_act_b.shape or z_act_a.ndim != 2:
        raise shape_mismatch("invariant_loss", z_act_a.shape, z_act_b.shape)
    check_simplex(z_act_a, "Z_act")
    check_simplex(z_act_b, "Z'_act")
    forward = _cross_entropy(z_act_a, z_act_b)
    if not symmetric:
        return forward
    return (forward + _cross_entropy(z_act_b, z_act_a)) * 0.5


def mean_entropy(z_act):
    """H(Z̄): entropia do vetor médio de probabilidades do batch."""
    z_act = ndcore.as_tensor(z_act)
    check_simplex(z_act)
    mean = z_act.mean(axis=0)
    return -(mean * ndcore.safe_log(mean)).sum()


# ============================================================
#  Termos equivariantes e regularização
# ============================================================
def equivariant_loss(pred, z_pose_b):
    """(1/B) Σ_i ||pred_i - Z'_i||².

    Raises:
        DimensionError: Shapes diferentes.
    """
    pred, z_pose_b = ndcore.as_tensor(pred), ndcore.as_tensor(z_pose_b)
    if pred.shape != z_pose_b.shape or pred.ndim != 2:
        raise shape_mismatch("equivariant_loss", pred.shape, z_pose_b.shape)
    diff = pred - z_pose_b
    return (diff * diff).sum() * (1.0 / pred.shape[0])


def variance_reg(z):
    """V(Z) = (1/d) Σ_j max(0, 1 - sqrt(Var(Z_·j))).

    Raises:
        DegenerateBatchError: B < 2.
    """
    _, variance = ndcore.batch_stats(z)
    std = (variance + VAR_EPS).sqrt()
    return (1.0 - std).relu().mean()


def covariance_reg(z):
    """C(Z) = (1/d) Σ_{i≠j} Cov(Z)_ij².

    Raises:
        DegenerateBatchError: B < 2.
    """
    cov = ndcore.covariance_matrix(z)
    d = cov.shape[0]
    off_diagonal = cov * (1.0 - np.eye(d))
    return (off_diagonal * off_diagonal).sum() * (1.0 / d)


# ============================================================
#  Loss total
# ============================================================
def total_loss(z_act_a, z_act_b, z_pose_a, z_pose_b, pred, weights=None, symmetric=True):
    """Combinação ponderada de todos os termos.

    total = λ_inv·CE − (H(Z̄) + H(Z̄')) + λ_equi·MSE
            + [λ_C·C + λ_V·V](Z_pose) + [λ_C·C + λ_V·V](Z'_pose) + λ_V·V(pred)

    Returns:
        LossBreakdown

    Raises:
        DimensionError: Tamanhos de batch diferentes entre as entradas.
    """
    weights = weights or LossWeights()
    tensors = [ndcore.as_tensor(t) for t in (z_act_a, z_act_b, z_pose_a, z_pose_b, pred)]
    sizes = {t.shape[0] for t in tensors}
    if len(sizes) != 1:
        raise shape_mismatch("total_loss", tensors[0].shape, tensors[2].shape)
    z_act_a, z_act_b, z_pose_a, z_pose_b, pred = tensors

    terms = dict(
        invariant_ce=invariant_loss(z_act_a, z_act_b, symmetric=symmetric),
        mean_entropy_a=mean_entropy(z_act_a),
        mean_entropy_b=mean_entropy(z_act_b),
        equivariant_mse=equivariant_loss(pred, z_pose_b),
        var_reg_a=variance_reg(z_pose_a),
        var_reg_b=variance_reg(z_pose_b),
        cov_reg_a=covariance_reg(z_pose_a),
        cov_reg_b=covariance_reg(z_pose_b),
        predictor_var_reg=variance_reg(pred),
    )
    total = (
        terms["invariant_ce"] * weights.inv
        - (terms["mean_entropy_a"] + terms["mean_entropy_b"])
        + terms["equivariant_mse"] * weights.equi
        + terms["cov_reg_a"] * weights.cov + terms["var_reg_a"] * weights.var
        + terms["cov_reg_b"] * weights.cov + terms["var_reg_b"] * weights.var
        + terms["predictor_var_reg"] * weights.var
    )
    return LossBreakdown(total=total, **terms)
