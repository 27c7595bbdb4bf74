import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple, Optional

import numpy as np

import config as settings
from app.errors import CapsIEError, ConfigurationError, NumericError, StorageError, TrainingDivergedError
from app.services.charts_service import emit_curves
from app.services.evaluation_service import (
    CLASSIFICATION_PROBE,
    ROTATION_PROBE,
    TASKS,
    classification_probe,
    embed_archive,
    evaluate_checkpoint,
    restore_model,
    rotation_probe,
)
from app.services.objective_service import LossWeights, mean_entropy, total_loss
from app.services.runs_service import JsonlLog, merge_reports, prepare_run_dir, write_manifest, write_report
from app.services.synthgen_service import load_archive, pair_relative_quaternions, sample_epoch_pairs
from models import ndcore
from models.capsie import PROJECTORS, ModelConfig, build_model
from models.capsnet import EncoderConfig
from models.checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from models.optim import Adam, AdamState

logger = logging.getLogger("Treino")
sweep_logger = logging.getLogger("Sweep")

# Chaves que podem mudar entre um checkpoint e a retomada.
RESUMABLE_KEYS = ("archive", "epochs", "eval_every", "checkpoint_every")
COLLAPSE_FRACTION = 0.5
COLLAPSE_BATCH = 256


# ============================================================
#  Configuração
# ============================================================
@dataclass
class TrainConfig:
    """Configuração do pré-treino; cada campo espelha uma flag da CLI."""

    archive: str = ""
    n_caps: int = 16
    projector: str = "capsule"
    epochs: int = 100
    batch_size: int = 128
    pairs_per_object: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lambda_inv: float = 0.1
    lambda_equi: float = 5.0
    lambda_v: float = 10.0
    lambda_c: float = 1.0
    symmetric_ce: bool = True
    encoder_widths: tuple = (32, 64, 128, 128)
    encoder_strides: tuple = (1, 2, 2, 2)
    predictor_hidden: Optional[int] = None
    split_hidden: int = 512
    eval_every: int = 10
    checkpoint_every: int = 10
    online_probe_epochs: int = 10
    online_pairs_per_object: int = 8

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.encoder_strides = tuple(int(s) for s in self.encoder_strides)
        if self.seed is None:
            raise ConfigurationError("TrainConfig: seed é obrigatória")
        if int(self.batch_size) < 2:
            raise ConfigurationError(f"TrainConfig: batch_size deve ser >= 2, recebeu {self.batch_size}")
        if self.projector not in PROJECTORS:
            raise ConfigurationError(f"TrainConfig: projector desconhecido: {self.projector}")
        if int(self.epochs) < 1 or int(self.n_caps) < 1 or int(self.pairs_per_object) < 1:
            raise ConfigurationError("TrainConfig: epochs, n_caps e pairs_per_object devem ser >= 1")
        if int(self.eval_every) < 0 or int(self.checkpoint_every) < 0:
            raise ConfigurationError("TrainConfig: eval_every e checkpoint_every devem ser >= 0")
        if len(self.encoder_widths) != len(self.encoder_strides):
            raise ConfigurationError("TrainConfig: encoder_widths e encoder_strides com tamanhos diferentes")

    def weights(self):
        return LossWeights(inv=self.lambda_inv, equi=self.lambda_equi, var=self.lambda_v, cov=self.lambda_c)

    def model_config(self, image_size):
        encoder = EncoderConfig(
            image_size=int(image_size),
            widths=self.encoder_widths,
            kernel_sizes=(3,) * len(self.encoder_widths),
            strides=self.encoder_strides,
        )
        return ModelConfig(
            n_caps=int(self.n_caps),
            projector=self.projector,
            encoder=encoder,
            predictor_hidden=self.predictor_hidden,
            split_hidden=int(self.split_hidden),
        )

    def to_dict(self):
        data = asdict(self)
        data["encoder_widths"] = list(self.encoder_widths)
        data["encoder_strides"] = list(self.encoder_strides)
        return data

    @classmethod
    def from_dict(cls, data):
        """Raises:
            ConfigurationError: Chave desconhecida.
        """
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"TrainConfig: chaves desconhecidas {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except OSError as exc:
            raise StorageError(f"Falha ao ler config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigurationError(f"Config {path} não é JSON válido: {exc}") from exc
        return cls.from_dict(data)

    def config_hash(self, exclude=()):
        data = {k: v for k, v in self.to_dict().items() if k not in exclude}
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def resume_hash(self):
        return self.config_hash(exclude=RESUMABLE_KEYS)


class TrainResult(NamedTuple):
    model: object
    state: CheckpointState
    records: list
    run_dir: Optional[str]


# ============================================================
#  Passo de treino
# ============================================================
def train_step(model, optimizer, archive, idx_a, idx_b, g_rel, weights, symmetric=True, batch_index=0):
    """Um passo: embeddings das duas vistas, preditor com g_rel, loss total e Adam.

    Returns:
        LossBreakdown

    Raises:
        TrainingDivergedError: Termo intermediário ou loss não finitos (stage
            "forward", sem componentes) ou gradiente não finito (stage
            "backward", com os termos do batch).
    """
    optimizer.zero_grad()
    try:
        emb_a = model.embed(ndcore.Tensor(archive.images(idx_a)))
        emb_b = model.embed(ndcore.Tensor(archive.images(idx_b)))
        pred = model.predictor(emb_a.pose, g_rel)
        breakdown = total_loss(emb_a.act, emb_b.act, emb_a.pose, emb_b.pose, pred, weights, symmetric)
    except NumericError as exc:
        raise TrainingDivergedError(
            f"valores não finitos no batch {batch_index}: {exc}",
            batch_index=batch_index,
            stage="forward",
        ) from exc
    breakdown.total.backward()
    bad = [name for name, p in optimizer.params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad:
        raise TrainingDivergedError(f"gradiente não finito no batch {batch_index}: {bad[:3]}",
                                    batch_index=batch_index, components=breakdown.as_dict(), stage="backward")
    optimizer.step()
    return breakdown


def _checkpoint_state(model, optimizer, sampler, config, model_config, epoch, step):
    return CheckpointState(
        params=model.state_dict(),
        adam=AdamState(
            lr=optimizer.state.lr, beta1=optimizer.state.beta1, beta2=optimizer.state.beta2,
            eps=optimizer.state.eps, step=optimizer.state.step,
            m={k: v.copy() for k, v in optimizer.state.m.items()},
            v={k: v.copy() for k, v in optimizer.state.v.items()},
        ),
        epoch=epoch,
        step=step,
        rng_state=sampler.bit_generator.state,
        config=config.to_dict(),
        config_hash=config.config_hash(),
        model_config=model_config.to_dict(),
        extra={"resume_hash": config.resume_hash(), "pairing": "resampled_each_epoch"},
    )


def collapse_check(model, archive, n_caps):
    """H(Z̄_act) de um batch de validação contra 0.5·log K."""
    objects = archive.object_ids("val")
    if len(objects) == 0:
        objects = archive.object_ids("all")
    indices = archive.record_indices(objects)[:COLLAPSE_BATCH]
    with ndcore.no_grad():
        act = model.embed(ndcore.Tensor(archive.images(indices))).act
        entropy = mean_entropy(act).item()
    threshold = COLLAPSE_FRACTION * math.log(n_caps) if n_caps > 1 else 0.0
    record = {"type": "collapse_check", "mean_entropy": entropy, "threshold": threshold,
              "passed": bool(entropy >= threshold)}
    if record["passed"]:
        logger.info(f"✅ Uso das cápsulas: H(Z̄)={entropy:.4f} >= {threshold:.4f}")
    else:
        logger.warning(f"⚠️ Possível colapso: H(Z̄)={entropy:.4f} < {threshold:.4f}")
    return record


# ============================================================
#  Avaliação online
# ============================================================
def online_eval(model, archive, config, warm=None):
    """Probes de classificação e rotação sobre a representação do encoder (congelada).

    Os probes recomeçam dos pesos da avaliação anterior (`warm`).

    Returns:
        tuple[dict, dict]: Métricas e os pesos dos probes para a próxima rodada.
    """
    if isinstance(model, CheckpointState):
        model = restore_model(model)
    warm = warm or {}
    table = embed_archive(model, archive)
    cls_config = replace(CLASSIFICATION_PROBE, epochs=config.online_probe_epochs, seed=config.seed)
    rot_config = replace(ROTATION_PROBE, epochs=config.online_probe_epochs, seed=config.seed)
    cls = classification_probe(table, "representation", cls_config, archive.num_classes,
                               init_state=warm.get("classification"))
    rot = rotation_probe(table, "representation", rot_config,
                         max_pairs_per_object=config.online_pairs_per_object, init_state=warm.get("rotation"))
    metrics = {"classification_top1": cls.value, "rotation_r2": rot.value}
    return metrics, {"classification": cls.state, "rotation": rot.state}


def eval_series(records):
    """Séries temporais {métrica: [(época, valor), ...]} dos registros de avaliação."""
    series = {}
    for record in records:
        if record.get("type") != "eval":
            continue
        for key, value in record.items():
            if key in ("type", "epoch", "step"):
                continue
            series.setdefault(key, []).append((record["epoch"], value))
    return series


# ============================================================
#  Pré-treino
# ============================================================
def pretrain(config, archive, run_dir=None, resume=None):
    """Pré-treino completo com log por passo, avaliação online e checkpoints.

    Args:
        config (TrainConfig): Configuração.
        archive (DatasetArchive): Dataset (pares só de objetos de treino).
        run_dir (str, optional): Diretório da rodada (log.jsonl, checkpoints/).
        resume (str | CheckpointState, optional): Checkpoint de onde continuar.

    Returns:
        TrainResult

    Raises:
        ConfigurationError: Checkpoint incompatível com a configuração.
        TrainingDivergedError: Loss não finita.
    """
    model_config = config.model_config(archive.image_size)
    init_seed, sampler_seed = np.random.SeedSequence(int(config.seed)).spawn(2)
    model = build_model(model_config, np.random.default_rng(init_seed))
    sampler = np.random.default_rng(sampler_seed)
    adam_state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    start_epoch, step = 0, 0

    if resume is not None:
        state = resume if isinstance(resume, CheckpointState) else load_checkpoint(resume)
        if state.extra.get("resume_hash") != config.resume_hash():
            raise ConfigurationError("checkpoint foi gerado com outra configuração (resume_hash diferente)")
        model.load_state_dict(state.params)
        adam_state = AdamState(lr=state.adam.lr, beta1=state.adam.beta1, beta2=state.adam.beta2,
                               eps=state.adam.eps, step=state.adam.step,
                               m={k: v.copy() for k, v in state.adam.m.items()},
                               v={k: v.copy() for k, v in state.adam.v.items()})
        sampler.bit_generator.state = state.rng_state
        start_epoch, step = int(state.epoch), int(state.step)
        logger.info(f"Retomando da época {start_epoch} (passo {step})")

    optimizer = Adam(model.named_parameters(), state=adam_state)
    paths = prepare_run_dir(run_dir) if run_dir else None
    log = JsonlLog(paths.log, append=resume is not None) if paths else None
    records = []

    def emit(record):
        records.append(record)
        if log is not None:
            log.write(record)

    weights = config.weights()
    train_objects = np.repeat(archive.object_ids("train"), int(config.pairs_per_object))
    logger.info(
        f"Pré-treino: projector={config.projector} n_caps={config.n_caps} "
        f"params={model.parameter_count()} pares/época={len(train_objects)}"
    )
    warm = None
    try:
        for epoch in range(start_epoch, int(config.epochs)):
            idx_a, idx_b = sample_epoch_pairs(archive, sampler, train_objects)
            order = sampler.permutation(len(idx_a))
            idx_a, idx_b = idx_a[order], idx_b[order]
            g_rel = pair_relative_quaternions(archive, idx_a, idx_b)
            sums, n_batches = {}, 0
            for batch_index, start in enumerate(range(0, len(idx_a), int(config.batch_size))):
                batch = slice(start, start + int(config.batch_size))
                if len(idx_a[batch]) < 2:
                    continue
                try:
                    breakdown = train_step(model, optimizer, archive, idx_a[batch], idx_b[batch], g_rel[batch],
                                           weights, config.symmetric_ce, batch_index)
                except TrainingDivergedError as exc:
                    logger.error(f"❌ Treino divergiu na época {epoch + 1}, batch {exc.batch_index}: {exc.components}")
                    emit({"type": "diverged", "epoch": epoch + 1, "step": step, "batch": exc.batch_index,
                          "stage": exc.stage, "components": exc.components})
                    raise
                step += 1
                last_components = breakdown.as_dict()
                emit({"type": "step", "epoch": epoch + 1, "step": step, "batch": batch_index,
                      "lr": float(optimizer.state.lr), **last_components})
                for key, value in last_components.items():
                    sums[key] = sums.get(key, 0.0) + value
                n_batches += 1

            means = {k: v / max(n_batches, 1) for k, v in sums.items()}
            logger.info(
                f"Época {epoch + 1}/{config.epochs}: total={means.get('total', float('nan')):.4f} "
                f"ce={means.get('invariant_ce', float('nan')):.4f} "
                f"mse={means.get('equivariant_mse', float('nan')):.4f}"
            )
            if config.eval_every and (epoch + 1) % int(config.eval_every) == 0:
                metrics, warm = online_eval(model, archive, config, warm)
                emit({"type": "eval", "epoch": epoch + 1, "step": step, **metrics})
            if paths and config.checkpoint_every and (epoch + 1) % int(config.checkpoint_every) == 0:
                state = _checkpoint_state(model, optimizer, sampler, config, model_config, epoch + 1, step)
                save_checkpoint(state, os.path.join(paths.checkpoints, f"epoch_{epoch + 1:04d}.ckpt"))

        emit(collapse_check(model, archive, int(config.n_caps)))
        state = _checkpoint_state(model, optimizer, sampler, config, model_config, int(config.epochs), step)
        if paths:
            save_checkpoint(state, os.path.join(paths.checkpoints, "last.ckpt"))
    finally:
        if log is not None:
            log.close()
    logger.info(f"✅ Pré-treino concluído ({step} passos)")
    return TrainResult(model=model, state=state, records=records, run_dir=run_dir)


# ============================================================
#  Rodada completa e sweep de cápsulas
# ============================================================
def run_single(config, archive_path, run_dir, tasks=TASKS, probe_epochs=None):
    """Pré-treino + avaliação + relatório + gráficos de uma configuração.

    Returns:
        dict: Linha do relatório do sweep.
    """
    archive = load_archive(archive_path)
    config = replace(config, archive=archive_path)
    result = pretrain(config, archive, run_dir=run_dir)
    report = evaluate_checkpoint(result.state, archive, tasks=tasks, probe_epochs=probe_epochs, seed=config.seed)
    paths = prepare_run_dir(run_dir)
    write_report(report, paths.reports)
    charts = emit_curves(result.records, paths.charts) if eval_series(result.records) else []
    write_manifest(run_dir, "pretrain", config.to_dict(), inputs=[archive_path],
                   outputs={"checkpoint": os.path.join(paths.checkpoints, "last.ckpt"), "charts": charts})
    online = eval_series(result.records).get("classification_top1", [])
    return {
        "run_dir": run_dir,
        "n_caps": int(config.n_caps),
        "pose_dim": int(config.n_caps) * 16,
        "archive_checksum": report["archive_checksum"],
        "final_online_top1": online[-1][1] if online else None,
        **report["metrics"],
    }


def _sweep_queue():
    from redis import Redis
    from rq import Queue

    return Queue(settings.SWEEP_QUEUE, connection=Redis.from_url(settings.REDIS_URL))


def _wait_for_jobs(jobs, poll_seconds=2.0, timeout=None):
    started = time.monotonic()
    results = [None] * len(jobs)
    pending = set(range(len(jobs)))
    while pending:
        for i in sorted(pending):
            status = jobs[i].get_status()
            if status == "finished":
                results[i] = jobs[i].result
                pending.discard(i)
                sweep_logger.info(f"✅ Job {jobs[i].get_id()} concluído")
            elif status in ("failed", "stopped", "canceled"):
                raise CapsIEError(f"job {jobs[i].get_id()} do sweep terminou com status {status}")
        if pending:
            if timeout is not None and time.monotonic() - started > timeout:
                raise CapsIEError(f"sweep: {len(pending)} job(s) sem resposta após {timeout}s")
            time.sleep(poll_seconds)
    return results


def capsule_sweep(base_config, n_caps_list, archive_path, runs_root, parallel=False, queue=None,
                  tasks=TASKS, probe_epochs=None, poll_seconds=2.0, timeout=None):
    """Uma rodada (pré-treino + avaliação) por número de cápsulas, mesma semente e dataset.

    Com parallel=True cada rodada vira um job na fila RQ do sweep.

    Returns:
        list[dict]: Uma linha por número de cápsulas, na ordem pedida.
    """
    n_caps_list = [int(n) for n in n_caps_list]
    if not n_caps_list:
        raise ConfigurationError("sweep: lista de cápsulas vazia")
    run_dirs = [os.path.join(runs_root, f"caps-{n:03d}") for n in n_caps_list]
    configs = [replace(base_config, n_caps=n, archive=archive_path) for n in n_caps_list]
    sweep_logger.info(f"Sweep de cápsulas {n_caps_list} ({'paralelo' if parallel else 'sequencial'})")

    if parallel:
        queue = queue or _sweep_queue()
        jobs = [
            queue.enqueue("app.workers.process_sweep_run", cfg.to_dict(), archive_path, run_dir,
                          list(tasks), probe_epochs, job_timeout=-1, result_ttl=3600, failure_ttl=3600)
            for cfg, run_dir in zip(configs, run_dirs)
        ]
        sweep_logger.info(f"{len(jobs)} job(s) enfileirado(s) em {queue.name}")
        rows = _wait_for_jobs(jobs, poll_seconds=poll_seconds, timeout=timeout)
    else:
        rows = [run_single(cfg, archive_path, run_dir, tasks, probe_epochs) for cfg, run_dir in zip(configs, run_dirs)]

    checksums = {row["archive_checksum"] for row in rows}
    if len(checksums) != 1:
        raise ConfigurationError(f"sweep: rodadas com datasets diferentes ({len(checksums)} checksums)")
    merge_reports(run_dirs, os.path.join(runs_root, "sweep.csv"))
    for row in rows:
        sweep_logger.info(
            f"n_caps={row['n_caps']:>3} pose_dim={row['pose_dim']:>4} "
            f"top1_online={row['final_online_top1']} rotation_r2={row.get('rotation_r2')}"
        )
    return rows
