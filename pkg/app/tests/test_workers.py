import os
from unittest.mock import MagicMock, Mock, patch

import pytest

from app.errors import CapsIEError, ConfigurationError
from app.services.train_service import TrainConfig, capsule_sweep
from app.workers import process_sweep_run


def _row(n_caps, checksum="abc"):
    return {"run_dir": f"caps-{n_caps:03d}", "n_caps": n_caps, "pose_dim": 16 * n_caps,
            "archive_checksum": checksum, "final_online_top1": 0.5, "rotation_r2": 0.1}


def _job(status, result=None, job_id="job"):
    job = Mock()
    job.get_status.return_value = status
    job.result = result
    job.get_id.return_value = job_id
    return job


def test_process_sweep_run_success():
    """Testa que o worker reconstrói a config e repassa as tarefas"""
    config = TrainConfig(n_caps=4, archive="data.ciea")
    with patch("app.workers.run_single", return_value=_row(4)) as mock_run:
        row = process_sweep_run(config.to_dict(), "data.ciea", "runs/caps-004", ["rotation"], 2)
    assert row["n_caps"] == 4
    called_config, archive_path, run_dir = mock_run.call_args.args
    assert called_config == config
    assert (archive_path, run_dir) == ("data.ciea", "runs/caps-004")
    assert mock_run.call_args.kwargs == {"probe_epochs": 2, "tasks": ("rotation",)}


def test_process_sweep_run_failure_reraises():
    """Testa que falhas da rodada sobem para o RQ marcar o job como failed"""
    with patch("app.workers.run_single", side_effect=RuntimeError("sem memória")):
        with pytest.raises(RuntimeError):
            process_sweep_run(TrainConfig().to_dict(), "data.ciea", "runs/caps-016")


def test_process_sweep_run_bad_config():
    """Testa erro de configuração vindo do payload do job"""
    with pytest.raises(ConfigurationError):
        process_sweep_run({"n_caps": 4, "dropout": 0.1}, "data.ciea", "runs/x")


def test_sequential_sweep(tmp_path):
    """Testa sweep sequencial: uma rodada por n_caps, mesma semente, CSV combinado"""
    rows = [_row(2), _row(4)]
    with patch("app.services.train_service.run_single", side_effect=rows) as mock_run, \
            patch("app.services.train_service.merge_reports") as mock_merge:
        result = capsule_sweep(TrainConfig(seed=7), [2, 4], "data.ciea", str(tmp_path))
    assert result == rows
    configs = [call.args[0] for call in mock_run.call_args_list]
    assert [c.n_caps for c in configs] == [2, 4]
    assert {c.seed for c in configs} == {7}
    assert [call.args[2] for call in mock_run.call_args_list] == [
        os.path.join(str(tmp_path), "caps-002"), os.path.join(str(tmp_path), "caps-004")]
    mock_merge.assert_called_once()
    assert mock_merge.call_args.args[1] == os.path.join(str(tmp_path), "sweep.csv")


def test_sweep_rejects_different_datasets(tmp_path):
    """Testa erro quando as rodadas usaram datasets diferentes"""
    with patch("app.services.train_service.run_single", side_effect=[_row(2, "a"), _row(4, "b")]), \
            patch("app.services.train_service.merge_reports"):
        with pytest.raises(ConfigurationError):
            capsule_sweep(TrainConfig(), [2, 4], "data.ciea", str(tmp_path))


def test_sweep_empty_caps(tmp_path):
    """Testa lista de cápsulas vazia"""
    with pytest.raises(ConfigurationError):
        capsule_sweep(TrainConfig(), [], "data.ciea", str(tmp_path))


def test_parallel_sweep_enqueues_jobs(tmp_path):
    """Testa sweep paralelo: um job por n_caps na fila e resultados na ordem pedida"""
    queue = MagicMock()
    queue.name = "capsie_sweep_queue"
    queue.enqueue.side_effect = [_job("finished", _row(8), "j8"), _job("finished", _row(16), "j16")]
    with patch("app.services.train_service.merge_reports"):
        rows = capsule_sweep(TrainConfig(), [8, 16], "data.ciea", str(tmp_path), parallel=True,
                             queue=queue, poll_seconds=0)
    assert [r["n_caps"] for r in rows] == [8, 16]
    assert queue.enqueue.call_count == 2
    first = queue.enqueue.call_args_list[0]
    assert first.args[0] == "app.workers.process_sweep_run"
    assert first.args[1]["n_caps"] == 8
    assert first.args[3] == os.path.join(str(tmp_path), "caps-008")


def test_parallel_sweep_failed_job(tmp_path):
    """Testa que um job com status failed interrompe o sweep"""
    queue = MagicMock()
    queue.enqueue.side_effect = [_job("finished", _row(8)), _job("failed")]
    with patch("app.services.train_service.merge_reports"):
        with pytest.raises(CapsIEError):
            capsule_sweep(TrainConfig(), [8, 16], "data.ciea", str(tmp_path), parallel=True,
                          queue=queue, poll_seconds=0)
