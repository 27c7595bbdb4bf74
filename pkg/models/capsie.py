"""Montagem do modelo: encoder -> projetor (cápsulas ou split-MLP) -> embeddings, mais o preditor."""
import hashlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from app.errors import ConfigurationError
from models import ndcore
from models.capsnet import (
    POSE_DIM,
    CapsuleProjector,
    Encoder,
    EncoderConfig,
    SplitMLPProjector,
    global_average_pool,
    spatial_average_pool,
)
from models.layers import Module
from models.predictor import HyperPredictor

PROJECTORS = ("capsule", "split-mlp")


@dataclass
class ModelConfig:
    n_caps: int = 16
    projector: str = "capsule"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    predictor_hidden: Optional[int] = None
    split_hidden: int = 512

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig.from_dict(self.encoder)
        if self.projector not in PROJECTORS:
            raise ConfigurationError(f"projector desconhecido: {self.projector} (use {', '.join(PROJECTORS)})")
        if int(self.n_caps) < 1:
            raise ConfigurationError(f"n_caps deve ser >= 1, recebeu {self.n_caps}")

    @property
    def pose_dim(self):
        return self.n_caps * POSE_DIM

    def to_dict(self):
        data = asdict(self)
        data["encoder"] = self.encoder.to_dict()
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class Embeddings(NamedTuple):
    """Embeddings de um batch; `primary` só existe no projetor de cápsulas."""

    representation: ndcore.Tensor
    primary: Optional[ndcore.Tensor]
    act: ndcore.Tensor
    pose: ndcore.Tensor
    feature_map: ndcore.Tensor


class CapsIEModel(Module):
    def __init__(self, config, rng):
        self.config = config
        self.encoder = Encoder(config.encoder, rng)
        feature_shape = config.encoder.output_shape()
        if config.projector == "capsule":
            self.projector = CapsuleProjector(feature_shape, config.n_caps, rng)
        else:
            self.projector = SplitMLPProjector(
                feature_shape[0], config.n_caps, config.pose_dim, rng, hidden=config.split_hidden
            )
        self.predictor = HyperPredictor(config.pose_dim, rng, hidden=config.predictor_hidden)

    def forward(self, images):
        return self.embed(images)

    def embed(self, images):
        images = ndcore.as_tensor(images)
        if images.ndim == 3:
            images = images.reshape((1,) + images.shape)
        feature_map = self.encoder(images)
        representation = global_average_pool(feature_map)
        if self.config.projector == "capsule":
            primary_grid, routed = self.projector(feature_map)
            pooled = spatial_average_pool(primary_grid)
            primary = ndcore.concat([pooled.activations, pooled.pose_embedding()], axis=1)
            return Embeddings(representation, primary, routed.activations, routed.pose_embedding(), feature_map)
        z_inv, z_equi = self.projector(representation)
        return Embeddings(representation, None, z_inv.softmax(axis=-1), z_equi, feature_map)

    def backbone_parameters(self):
        """Encoder + projetor (o que os probes nunca podem alterar)."""
        params = self.encoder.named_parameters(prefix="encoder.")
        params.update(self.projector.named_parameters(prefix="projector."))
        return params

    def backbone_checksum(self):
        digest = hashlib.sha256()
        for name, p in sorted(self.backbone_parameters().items()):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()


def build_model(config, rng):
    """Instancia o modelo a partir de ModelConfig (ou dict)."""
    if isinstance(config, dict):
        config = ModelConfig.from_dict(config)
    return CapsIEModel(config, rng)
