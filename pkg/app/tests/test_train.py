import os
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from app.errors import ConfigurationError, NumericError, TrainingDivergedError
from app.services.objective_service import LossWeights, total_loss
from app.services.runs_service import read_log
from app.services.synthgen_service import generate_dataset, pair_relative_quaternions
from app.services.train_service import TrainConfig, eval_series, online_eval, pretrain, train_step
from models import ndcore
from models.capsie import build_model
from models.optim import Adam


@pytest.fixture(scope="module")
def archive():
    """Dataset mínimo: 2 classes x 4 objetos x 3 vistas, 16x16"""
    return generate_dataset(num_classes=2, objects_per_class=4, n_views=3, size=16, seed=0)


@pytest.fixture
def config():
    """Configuração de treino mínima (roda em segundos)"""
    return TrainConfig(
        n_caps=2,
        epochs=2,
        batch_size=4,
        pairs_per_object=1,
        encoder_widths=(4, 8),
        encoder_strides=(2, 2),
        predictor_hidden=8,
        eval_every=1,
        checkpoint_every=1,
        online_probe_epochs=2,
        online_pairs_per_object=2,
    )


def _steps(records, epoch=None):
    return [r for r in records if r["type"] == "step" and (epoch is None or r["epoch"] == epoch)]


def test_config_validation():
    """Testa erros de configuração: batch < 2, projector e chave desconhecida"""
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigurationError):
        TrainConfig(projector="mlp")
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"n_caps": 4, "foo": 1})
    with pytest.raises(ConfigurationError):
        TrainConfig(seed=None)


def test_config_hash(config):
    """Testa hash estável, sensível a hiperparâmetros e resume_hash sem épocas"""
    same = TrainConfig.from_dict(config.to_dict())
    assert same.config_hash() == config.config_hash()
    assert replace(config, lr=5e-4).config_hash() != config.config_hash()
    longer = replace(config, epochs=50)
    assert longer.config_hash() != config.config_hash()
    assert longer.resume_hash() == config.resume_hash()


def test_pretrain_smoke(archive, config, tmp_path):
    """Testa pré-treino curto: log por passo, avaliações, checkpoints e collapse_check"""
    run_dir = str(tmp_path / "run")
    result = pretrain(config, archive, run_dir=run_dir)
    records = read_log(os.path.join(run_dir, "log.jsonl"))
    assert records == result.records
    # 6 objetos de treino -> batches de 4 e 2 por época
    assert len(_steps(records)) == 4
    step = _steps(records)[0]
    assert {"total", "invariant_ce", "equivariant_mse", "var_reg_a", "cov_reg_b"} <= set(step)
    assert all(np.isfinite(r["total"]) for r in _steps(records))
    series = eval_series(records)
    assert len(series["classification_top1"]) == config.epochs // config.eval_every
    assert records[-1]["type"] == "collapse_check"
    for name in ("epoch_0001.ckpt", "epoch_0002.ckpt", "last.ckpt"):
        assert os.path.exists(os.path.join(run_dir, "checkpoints", name))
    assert result.state.epoch == 2 and result.state.step == 4


def test_pretrain_is_deterministic(archive, config, tmp_path):
    """Testa que duas rodadas idênticas produzem logs byte a byte iguais"""
    pretrain(config, archive, run_dir=str(tmp_path / "a"))
    pretrain(config, archive, run_dir=str(tmp_path / "b"))
    with open(tmp_path / "a" / "log.jsonl", "rb") as fa, open(tmp_path / "b" / "log.jsonl", "rb") as fb:
        assert fa.read() == fb.read()


def test_resume_reproduces_next_steps(archive, config, tmp_path):
    """Testa que retomar do checkpoint reproduz exatamente as perdas seguintes"""
    full = pretrain(config, archive, run_dir=str(tmp_path / "full"))
    short_config = replace(config, epochs=1)
    pretrain(short_config, archive, run_dir=str(tmp_path / "short"))
    resumed = pretrain(config, archive, run_dir=str(tmp_path / "short"),
                       resume=str(tmp_path / "short" / "checkpoints" / "last.ckpt"))
    assert _steps(resumed.records) == _steps(full.records, epoch=2)


def test_resume_with_other_config_rejected(archive, config, tmp_path):
    """Testa ConfigurationError ao retomar com hiperparâmetros diferentes"""
    first = pretrain(replace(config, epochs=1), archive)
    with pytest.raises(ConfigurationError):
        pretrain(replace(config, lr=1e-2), archive, resume=first.state)


def test_divergence_reports_batch(archive, config, tmp_path):
    """Testa TrainingDivergedError com índice do batch e registro no log"""
    with patch("app.services.train_service.total_loss", side_effect=NumericError("nan")):
        with pytest.raises(TrainingDivergedError) as excinfo:
            pretrain(config, archive, run_dir=str(tmp_path / "nan"))
    assert excinfo.value.batch_index == 0
    assert excinfo.value.stage == "forward"
    records = read_log(str(tmp_path / "nan" / "log.jsonl"))
    assert records[-1]["type"] == "diverged"


def test_pose_terms_off_leave_w_pose_without_gradient(archive, config):
    """Testa ablação: sem os termos de pose, W_pose não recebe gradiente"""
    model = build_model(config.model_config(archive.image_size), np.random.default_rng(0))
    idx_a, idx_b = np.array([0, 3, 6, 9]), np.array([1, 4, 7, 10])
    emb_a = model.embed(ndcore.Tensor(archive.images(idx_a)))
    emb_b = model.embed(ndcore.Tensor(archive.images(idx_b)))
    pred = model.predictor(emb_a.pose, pair_relative_quaternions(archive, idx_a, idx_b))
    weights = LossWeights(inv=0.1, equi=0.0, var=0.0, cov=0.0)
    total_loss(emb_a.act, emb_b.act, emb_a.pose, emb_b.pose, pred, weights).total.backward()
    grad = model.projector.routing.w_pose.grad
    assert grad is None or np.count_nonzero(grad) == 0
    assert np.count_nonzero(model.projector.routing.w_route.grad) > 0


def test_split_mlp_baseline_trains(archive, config):
    """Testa que o baseline split-MLP treina com o mesmo harness"""
    result = pretrain(replace(config, projector="split-mlp", split_hidden=8, epochs=1), archive)
    assert all(np.isfinite(r["total"]) for r in _steps(result.records))


def test_online_eval_from_state(archive, config):
    """Testa avaliação online a partir de um CheckpointState"""
    result = pretrain(replace(config, epochs=1, eval_every=0), archive)
    metrics, warm = online_eval(result.state, archive, config)
    assert set(metrics) == {"classification_top1", "rotation_r2"}
    assert set(warm) == {"classification", "rotation"}


def test_forward_divergence_does_not_reuse_previous_batch(archive, config, tmp_path):
    """Testa que a falha no forward do 2º batch não reporta os termos do batch anterior"""
    calls = []

    def fail_second(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise NumericError("nan")
        return total_loss(*args, **kwargs)

    with patch("app.services.train_service.total_loss", side_effect=fail_second):
        with pytest.raises(TrainingDivergedError) as excinfo:
            pretrain(config, archive, run_dir=str(tmp_path / "late"))
    assert excinfo.value.batch_index == 1
    assert excinfo.value.stage == "forward"
    assert excinfo.value.components == {}
    records = read_log(str(tmp_path / "late" / "log.jsonl"))
    assert records[-1]["type"] == "diverged"
    assert records[-1]["components"] == {}
    assert _steps(records)


def test_backward_divergence_reports_batch_terms(archive, config):
    """Testa gradiente não finito: stage backward com os termos da loss do próprio batch"""
    model = build_model(config.model_config(archive.image_size), np.random.default_rng(0))
    optimizer = Adam(model.named_parameters(), lr=1e-3)
    idx_a, idx_b = np.array([0, 3]), np.array([1, 4])
    g_rel = pair_relative_quaternions(archive, idx_a, idx_b)
    name = sorted(optimizer.params)[0]
    before = optimizer.params[name].data.copy()

    def poison(tensor):
        param = optimizer.params[name]
        param.grad = np.full_like(param.data, np.nan)

    with patch.object(ndcore.Tensor, "backward", autospec=True, side_effect=poison):
        with pytest.raises(TrainingDivergedError) as excinfo:
            train_step(model, optimizer, archive, idx_a, idx_b, g_rel, config.weights(), batch_index=3)
    assert excinfo.value.stage == "backward"
    assert excinfo.value.batch_index == 3
    assert np.isfinite(excinfo.value.components["total"])
    np.testing.assert_array_equal(optimizer.params[name].data, before)
