import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from app.errors import ConfigurationError, DegenerateTargetError, ParameterError, shape_mismatch
from app.services.rotations_service import canonicalize
from models import ndcore
from models.capsnet import CapsuleClassHead
from models.layers import MLP, Linear
from models.optim import Adam

logger = logging.getLogger("Avaliacao")

DEPTHS = ("shallow", "deep")
TASKS = ("classification", "regression")


# ============================================================
#  Configuração e resultado
# ============================================================
@dataclass
class ProbeConfig:
    """Cabeça de avaliação treinada sobre embeddings congelados.

    shallow = uma camada linear; deep = in_dim-1024-out_dim com ReLU.
    """

    task: str = "classification"
    depth: str = "shallow"
    out_dim: int = 2
    in_dim: Optional[int] = None
    hidden: int = 1024
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    standardize: bool = True
    canonical_quaternions: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"ProbeConfig.task inválida: {self.task}")
        if self.depth not in DEPTHS:
            raise ConfigurationError(f"ProbeConfig.depth inválida: {self.depth}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("ProbeConfig: epochs e batch_size devem ser >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class ProbeResult:
    metric: str
    value: float
    train_value: float
    state: dict
    standardizer: tuple = field(default=None, repr=False)

    def to_dict(self):
        return {"metric": self.metric, "value": self.value, "train_value": self.train_value}


# ============================================================
#  Métricas
# ============================================================
def r_squared(y, y_hat):
    """R² = 1 - Σ(y - ŷ)² / Σ(y - ȳ)², somando sobre todas as entradas.

    Pode ser negativo.

    Raises:
        DimensionError: Shapes diferentes.
        DegenerateTargetError: N < 2 ou variância zero dos alvos.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise shape_mismatch("r_squared", y.shape, y_hat.shape)
    if y.shape[0] < 2:
        raise DegenerateTargetError(f"r_squared exige N >= 2, recebeu {y.shape[0]}")
    total = np.sum((y - y.mean(axis=0)) ** 2)
    if total == 0:
        raise DegenerateTargetError("r_squared: alvos com variância zero")
    return float(1.0 - np.sum((y - y_hat) ** 2) / total)


def top1_accuracy(labels, scores):
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))


# ============================================================
#  Treino
# ============================================================
def build_head(config, rng):
    if config.depth == "shallow":
        return Linear(config.in_dim, config.out_dim, rng)
    return MLP([config.in_dim, config.hidden, config.out_dim], rng)


def fit_standardizer(x):
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-6)
    return mean, std


def _classification_loss(scores, labels, probabilities=False):
    one_hot = np.eye(scores.shape[1])[labels]
    probs = scores if probabilities else scores.softmax(axis=-1)
    return -(ndcore.safe_log(probs) * one_hot).sum(axis=1).mean()


def _regression_loss(outputs, targets):
    diff = outputs - targets
    return (diff * diff).mean()


def _validate(x, y, config):
    if len(x) != len(y):
        raise ConfigurationError(f"probe: {len(x)} embeddings para {len(y)} alvos")
    if config.in_dim is not None and x.shape[1] != config.in_dim:
        raise ConfigurationError(f"probe: in_dim={config.in_dim} mas embeddings têm {x.shape[1]} dimensões")


def _score(config, targets, outputs):
    if config.task == "classification":
        return top1_accuracy(targets, outputs)
    if config.canonical_quaternions:
        outputs = canonicalize(outputs)
        targets = canonicalize(targets)
    return r_squared(targets, outputs)


def train_probe(embeddings, targets, config, eval_embeddings=None, eval_targets=None, init_state=None):
    """Treina uma cabeça sobre embeddings congelados e mede no conjunto de avaliação.

    Classificação: entropia cruzada, métrica top-1. Regressão: MSE, métrica R²
    (com canonicalização w >= 0 das saídas e dos alvos quando
    `canonical_quaternions`).

    Args:
        embeddings (np.ndarray): N × d (arrays numpy; nada volta para o backbone).
        targets (np.ndarray): N rótulos inteiros ou N × out_dim alvos.
        config (ProbeConfig): Hiperparâmetros.
        eval_embeddings, eval_targets: Conjunto de avaliação (padrão: o de treino).
        init_state (dict, optional): Pesos de uma rodada anterior (warm start).

    Returns:
        ProbeResult

    Raises:
        ConfigurationError: Dimensões inconsistentes.
    """
    x = np.asarray(embeddings, dtype=np.float32)
    y = np.asarray(targets)
    _validate(x, y, config)
    config = ProbeConfig(**{**config.to_dict(), "in_dim": x.shape[1]})
    if eval_embeddings is None:
        eval_x, eval_y = x, y
    else:
        eval_x, eval_y = np.asarray(eval_embeddings, dtype=np.float32), np.asarray(eval_targets)
        _validate(eval_x, eval_y, config)

    standardizer = fit_standardizer(x) if config.standardize else (0.0, 1.0)
    x_std = ((x - standardizer[0]) / standardizer[1]).astype(np.float32)
    eval_std = ((eval_x - standardizer[0]) / standardizer[1]).astype(np.float32)

    rng = np.random.default_rng(config.seed)
    head = build_head(config, rng)
    if init_state is not None:
        head.load_state_dict(init_state)
    optimizer = Adam(head.named_parameters(), lr=config.lr)
    classification = config.task == "classification"
    y_train = y.astype(np.int64) if classification else y.astype(np.float32)

    for _ in range(config.epochs):
        order = rng.permutation(len(x_std))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            optimizer.zero_grad()
            outputs = head(ndcore.Tensor(x_std[batch]))
            if classification:
                loss = _classification_loss(outputs, y_train[batch])
            else:
                loss = _regression_loss(outputs, y_train[batch])
            loss.backward()
            optimizer.step()

    with ndcore.no_grad():
        train_out = head(ndcore.Tensor(x_std)).data
        eval_out = head(ndcore.Tensor(eval_std)).data
    metric = "top1" if classification else "r2"
    result = ProbeResult(
        metric=metric,
        value=_score(config, eval_y, eval_out),
        train_value=_score(config, y, train_out),
        state=head.state_dict(),
        standardizer=standardizer,
    )
    logger.info(f"Probe {config.depth}/{config.task}: {metric}={result.value:.4f} (treino {result.train_value:.4f})")
    return result


def train_caps_probe(feature_maps, labels, config, n_caps, eval_feature_maps=None, eval_labels=None):
    """Cabeça de cápsulas: routing das cápsulas primárias para K cápsulas de classe.

    Os scores são as ativações roteadas (já somam 1), treinadas com entropia
    cruzada direta.
    """
    maps = np.asarray(feature_maps, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(maps) != len(labels):
        raise ConfigurationError(f"probe de cápsulas: {len(maps)} mapas para {len(labels)} rótulos")
    if eval_feature_maps is None:
        eval_maps, eval_labels = maps, labels
    else:
        eval_maps, eval_labels = np.asarray(eval_feature_maps, dtype=np.float32), np.asarray(eval_labels)

    rng = np.random.default_rng(config.seed)
    head = CapsuleClassHead(maps.shape[1:], n_caps, config.out_dim, rng)
    optimizer = Adam(head.named_parameters(), lr=config.lr)
    for _ in range(config.epochs):
        order = rng.permutation(len(maps))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            optimizer.zero_grad()
            scores = head(ndcore.Tensor(maps[batch]))
            loss = _classification_loss(scores, labels[batch], probabilities=True)
            loss.backward()
            optimizer.step()

    with ndcore.no_grad():
        train_scores = np.concatenate([head(ndcore.Tensor(maps[i:i + 256])).data for i in range(0, len(maps), 256)])
        eval_scores = np.concatenate(
            [head(ndcore.Tensor(eval_maps[i:i + 256])).data for i in range(0, len(eval_maps), 256)]
        )
    result = ProbeResult(
        metric="top1",
        value=top1_accuracy(eval_labels, eval_scores),
        train_value=top1_accuracy(labels, train_scores),
        state=head.state_dict(),
    )
    logger.info(f"Probe caps-head: top1={result.value:.4f} (treino {result.train_value:.4f})")
    return result
