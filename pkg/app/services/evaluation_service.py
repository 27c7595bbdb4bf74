import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from app.errors import ConfigurationError, ContractError, ParameterError
from app.services.probe_service import ProbeConfig, train_caps_probe, train_probe
from app.services.retrieval_service import (
    SPLITS,
    identity_predictor,
    model_predictor,
    random_predictor,
    retrieval_metrics,
    split_masks,
)
from app.services.rotations_service import relative_quaternions
from models import ndcore
from models.capsie import build_model
from models.checkpoint import CheckpointState, get_checkpoint

logger = logging.getLogger("Avaliacao")

SOURCES = ("representation", "primary", "act", "pose")
TASKS = ("classification", "rotation", "colour", "retrieval", "baselines")

# Épocas dos probes: protocolo original dividido por 3.
CLASSIFICATION_PROBE = ProbeConfig(task="classification", depth="shallow", epochs=100)
ROTATION_PROBE = ProbeConfig(task="regression", depth="deep", out_dim=4, epochs=100, canonical_quaternions=True)
COLOUR_PROBE = ProbeConfig(task="regression", depth="shallow", out_dim=2, epochs=17)

# Fonte usada na linha principal do relatório de cada tarefa.
PRIMARY_SOURCE = {"classification": "act", "rotation": "pose", "colour": "pose"}


# ============================================================
#  Embeddings do dataset
# ============================================================
@dataclass
class EmbeddingTable:
    """Embeddings de todas as fontes, alinhados com os registros do dataset."""

    indices: np.ndarray
    object_ids: np.ndarray
    class_ids: np.ndarray
    quaternions: np.ndarray
    factors: np.ndarray
    split: np.ndarray
    sources: dict
    feature_maps: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.indices)

    def source(self, name):
        if name not in self.sources:
            raise ConfigurationError(f"fonte de embedding indisponível: {name} (há {sorted(self.sources)})")
        return self.sources[name]

    def subset(self, mask):
        mask = np.asarray(mask)
        return EmbeddingTable(
            indices=self.indices[mask],
            object_ids=self.object_ids[mask],
            class_ids=self.class_ids[mask],
            quaternions=self.quaternions[mask],
            factors=self.factors[mask],
            split=self.split[mask],
            sources={k: v[mask] for k, v in self.sources.items()},
            feature_maps=None if self.feature_maps is None else self.feature_maps[mask],
        )


def embed_archive(model, archive, object_ids=None, batch_size=128, keep_feature_maps=False):
    """Passa as vistas pelo modelo congelado e guarda todas as fontes de embedding.

    Args:
        model (CapsIEModel): Modelo (não é alterado).
        archive (DatasetArchive): Dataset.
        object_ids (array, optional): Objetos a incluir (padrão: todos).
        keep_feature_maps (bool): Guarda o mapa do encoder (cabeça de cápsulas).

    Returns:
        EmbeddingTable
    """
    if object_ids is None:
        object_ids = archive.object_ids("all")
    indices = archive.record_indices(object_ids)
    val_objects = set(int(o) for o in archive.object_ids("val"))
    chunks = {name: [] for name in SOURCES}
    maps = []
    with ndcore.no_grad():
        for start in range(0, len(indices), batch_size):
            images = archive.images(indices[start:start + batch_size])
            out = model.embed(ndcore.Tensor(images))
            for name in SOURCES:
                value = getattr(out, name)
                if value is not None:
                    chunks[name].append(value.data.copy())
            if keep_feature_maps:
                maps.append(out.feature_map.data.copy())
    records = archive.records[indices]
    object_col = records["object_id"].astype(np.int64)
    return EmbeddingTable(
        indices=indices,
        object_ids=object_col,
        class_ids=records["class_id"].astype(np.int64),
        quaternions=records["quaternion"].astype(np.float64),
        factors=records["factors"].astype(np.float64),
        split=np.array(["val" if int(o) in val_objects else "train" for o in object_col]),
        sources={name: np.concatenate(parts) for name, parts in chunks.items() if parts},
        feature_maps=np.concatenate(maps) if maps else None,
    )


def view_pairs(object_ids, rng=None, max_pairs_per_object=None):
    """Todos os pares ordenados (a, b), a != b, de linhas do mesmo objeto.

    Com max_pairs_per_object, sorteia no máximo esse número por objeto.
    """
    first, second = [], []
    for obj in np.unique(object_ids):
        rows = np.flatnonzero(object_ids == obj)
        pairs = [(a, b) for a in rows for b in rows if a != b]
        if max_pairs_per_object is not None and len(pairs) > max_pairs_per_object:
            chosen = rng.choice(len(pairs), size=max_pairs_per_object, replace=False)
            pairs = [pairs[i] for i in sorted(chosen)]
        first.extend(p[0] for p in pairs)
        second.extend(p[1] for p in pairs)
    return np.asarray(first, dtype=np.int64), np.asarray(second, dtype=np.int64)


def _split_tables(table):
    train = table.subset(table.split == "train")
    val = table.subset(table.split == "val")
    if len(val) == 0:
        logger.warning("⚠️ Dataset sem objetos de validação; avaliando no próprio treino")
        val = train
    return train, val


# ============================================================
#  Tarefas
# ============================================================
def classification_probe(table, source, config=CLASSIFICATION_PROBE, num_classes=None, init_state=None):
    train, val = _split_tables(table)
    out_dim = num_classes or int(table.class_ids.max()) + 1
    config = replace(config, out_dim=out_dim)
    return train_probe(train.source(source), train.class_ids, config,
                       eval_embeddings=val.source(source), eval_targets=val.class_ids, init_state=init_state)


def caps_head_probe(table, n_caps, config=CLASSIFICATION_PROBE, num_classes=None):
    if table.feature_maps is None:
        raise ConfigurationError("cabeça de cápsulas exige embed_archive(..., keep_feature_maps=True)")
    train, val = _split_tables(table)
    config = replace(config, out_dim=num_classes or int(table.class_ids.max()) + 1)
    return train_caps_probe(train.feature_maps, train.class_ids, config, n_caps,
                            eval_feature_maps=val.feature_maps, eval_labels=val.class_ids)


def rotation_pair_dataset(table, source, rng=None, max_pairs_per_object=None):
    """Entrada = [z_a, z_b]; alvo = quaternion relativo q_b ⊗ q_a⁻¹."""
    a, b = view_pairs(table.object_ids, rng, max_pairs_per_object)
    z = table.source(source)
    inputs = np.concatenate([z[a], z[b]], axis=1)
    targets = relative_quaternions(table.quaternions[a], table.quaternions[b])
    return inputs, targets


def rotation_probe(table, source, config=ROTATION_PROBE, max_pairs_per_object=None, init_state=None):
    train, val = _split_tables(table)
    rng = np.random.default_rng(config.seed)
    x_train, y_train = rotation_pair_dataset(train, source, rng, max_pairs_per_object)
    x_val, y_val = rotation_pair_dataset(val, source, rng, max_pairs_per_object)
    return train_probe(x_train, y_train, config, eval_embeddings=x_val, eval_targets=y_val, init_state=init_state)


def colour_probe(table, source, config=COLOUR_PROBE):
    """Regressão de (floor_hue, light_hue) a partir de uma vista."""
    train, val = _split_tables(table)
    return train_probe(train.source(source), train.factors[:, :2], config,
                       eval_embeddings=val.source(source), eval_targets=val.factors[:, :2])


def retrieval_suite(table, predictor, restrict_to_object=True, source="pose"):
    """MRR/H@k/PRE para os splits train-train, val-val e val-all."""
    reports = {}
    for split in SPLITS:
        source_mask, retrieval_mask = split_masks(table.split, split)
        if not source_mask.any():
            continue
        source_name, retrieval_name = SPLITS[split]
        reports[split] = retrieval_metrics(
            table.source(source), table.object_ids, table.quaternions, predictor,
            source_mask=source_mask, retrieval_mask=retrieval_mask,
            restrict_to_object=restrict_to_object,
            source_split=source_name, retrieval_split=retrieval_name,
        ).to_dict()
    return reports


def random_embedding_table(table, seed=0):
    """Mesma estrutura do dataset, com embeddings de pose gaussianos."""
    rng = np.random.default_rng(seed)
    pose = table.source("pose")
    sources = {"pose": rng.normal(size=pose.shape).astype(np.float32)}
    return EmbeddingTable(table.indices, table.object_ids, table.class_ids, table.quaternions,
                          table.factors, table.split, sources)


# ============================================================
#  Checkpoint -> relatório
# ============================================================
def restore_model(state):
    """Reconstrói o modelo de um CheckpointState."""
    model = build_model(state.model_config, np.random.default_rng(0))
    model.load_state_dict(state.params)
    return model


def _resolve_state(checkpoint):
    if isinstance(checkpoint, CheckpointState):
        return checkpoint
    return get_checkpoint(checkpoint)


def evaluate_checkpoint(checkpoint, archive, tasks=TASKS, sources=None, caps_head=False,
                        restrict_to_object=True, probe_epochs=None, seed=0):
    """Roda as tarefas de avaliação pedidas e monta o relatório.

    Args:
        checkpoint: Caminho do checkpoint ou CheckpointState.
        archive (DatasetArchive): Dataset (o split treino/val vem do manifest).
        tasks (tuple[str]): Subconjunto de TASKS.
        sources (tuple[str], optional): Fontes de embedding (padrão: todas disponíveis).
        caps_head (bool): Adiciona a cabeça de cápsulas na classificação.
        probe_epochs (int, optional): Sobrescreve as épocas de todos os probes.

    Returns:
        dict: {"metrics": {...}, "by_source": {...}, "retrieval": {...}, ...}

    Raises:
        ParameterError: Tarefa desconhecida.
    """
    unknown = set(tasks) - set(TASKS)
    if unknown:
        raise ParameterError(f"tarefas desconhecidas: {sorted(unknown)}")
    state = _resolve_state(checkpoint)
    model = restore_model(state)
    checksum_before = model.backbone_checksum()
    table = embed_archive(model, archive, keep_feature_maps=caps_head)
    sources = [s for s in (sources or SOURCES) if s in table.sources]

    def configured(base):
        base = replace(base, seed=seed)
        return replace(base, epochs=probe_epochs) if probe_epochs else base

    probes = {
        "classification": configured(CLASSIFICATION_PROBE),
        "rotation": configured(ROTATION_PROBE),
        "colour": configured(COLOUR_PROBE),
    }
    runners = {
        "classification": lambda src: classification_probe(table, src, probes["classification"], archive.num_classes),
        "rotation": lambda src: rotation_probe(table, src, probes["rotation"]),
        "colour": lambda src: colour_probe(table, src, probes["colour"]),
    }
    metric_names = {"classification": "classification_top1", "rotation": "rotation_r2", "colour": "colour_r2"}

    report = {
        "checkpoint": {
            "epoch": state.epoch,
            "step": state.step,
            "config_hash": state.config_hash,
            "projector": state.model_config["projector"],
            "n_caps": state.model_config["n_caps"],
        },
        "archive_checksum": archive.checksum(),
        "metrics": {},
        "by_source": {src: {} for src in sources},
        "probes": {task: cfg.to_dict() for task, cfg in probes.items() if task in tasks},
    }
    for task in ("classification", "rotation", "colour"):
        if task not in tasks:
            continue
        logger.info(f"Tarefa {task} em {len(sources)} fonte(s) ...")
        for src in sources:
            result = runners[task](src)
            report["by_source"][src][metric_names[task]] = result.value
        primary = PRIMARY_SOURCE[task] if PRIMARY_SOURCE[task] in sources else sources[0]
        report["metrics"][metric_names[task]] = report["by_source"][primary][metric_names[task]]

    if caps_head and "classification" in tasks:
        result = caps_head_probe(table, state.model_config["n_caps"], probes["classification"], archive.num_classes)
        report["metrics"]["caps_head_top1"] = result.value

    if "retrieval" in tasks:
        trained = retrieval_suite(table, model_predictor(model), restrict_to_object)
        identity = retrieval_suite(table, identity_predictor, restrict_to_object)
        random = retrieval_suite(random_embedding_table(table, seed), random_predictor(seed), restrict_to_object)
        report["retrieval"] = {"trained": trained, "identity": identity, "random": random}
        main_split = "val-all" if "val-all" in trained else next(iter(trained))
        main = trained[main_split]
        report["metrics"].update({"mrr": main["mrr"], "h_at_1": main["h_at_1"], "h_at_5": main["h_at_5"],
                                  "pre": main["pre"]})
        report["metrics"]["identity_pre"] = identity[main_split]["pre"]
        report["metrics"]["random_mrr"] = random[main_split]["mrr"]

    if "baselines" in tasks:
        baseline = build_model(state.model_config, np.random.default_rng(seed + 1))
        baseline_table = embed_archive(baseline, archive)
        result = rotation_probe(baseline_table, "pose", probes["rotation"])
        report["metrics"]["random_encoder_rotation_r2"] = result.value

    if model.backbone_checksum() != checksum_before:
        raise ContractError("avaliação alterou os parâmetros do backbone")
    logger.info(f"✅ Avaliação concluída: {report['metrics']}")
    return report
