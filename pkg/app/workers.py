import logging
import traceback

from app.services.train_service import TrainConfig, run_single

logger = logging.getLogger("Worker")


def process_sweep_run(config_dict, archive_path, run_dir, tasks=None, probe_epochs=None):
    """
    Executa uma rodada do sweep de cápsulas (pré-treino + avaliação) dentro do worker.

    Args:
        config_dict (dict): TrainConfig serializada (to_dict).
        archive_path (str): Caminho do dataset.
        run_dir (str): Diretório da rodada.
        tasks (list[str], optional): Tarefas de avaliação (padrão: todas).
        probe_epochs (int, optional): Sobrescreve as épocas dos probes.

    Returns:
        dict: Linha do relatório do sweep (n_caps, pose_dim, métricas).

    Raises:
        Exception: Qualquer falha do pré-treino ou da avaliação; o job fica como failed no RQ.
    """
    try:
        train_config = TrainConfig.from_dict(config_dict)
        logger.info(f"Processando rodada n_caps={train_config.n_caps} em {run_dir}")
        kwargs = {"probe_epochs": probe_epochs}
        if tasks:
            kwargs["tasks"] = tuple(tasks)
        row = run_single(train_config, archive_path, run_dir, **kwargs)
        logger.info(f"✅ Rodada n_caps={train_config.n_caps} concluída")
        return row
    except Exception as e:
        traceback.print_exc()
        logger.error(f"❌ Erro na rodada {run_dir}: {e}")
        raise
