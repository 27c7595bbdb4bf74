import numpy as np
import pytest

from app.errors import StorageError
from models.checkpoint import CheckpointState, from_bytes, get_checkpoint, load_checkpoint, save_checkpoint, to_bytes
from models.optim import AdamState


@pytest.fixture
def state():
    """Estado de checkpoint pequeno com momentos do Adam e estado do gerador"""
    rng = np.random.default_rng(0)
    params = {"encoder.w": rng.normal(size=(2, 3)).astype(np.float32), "bias": np.zeros(3, np.float32)}
    adam = AdamState(lr=1e-3, step=7,
                     m={k: np.full_like(v, 0.5) for k, v in params.items()},
                     v={k: np.full_like(v, 0.25) for k, v in params.items()})
    return CheckpointState(
        params=params,
        adam=adam,
        epoch=3,
        step=7,
        rng_state=np.random.default_rng(1).bit_generator.state,
        config={"n_caps": 2},
        config_hash="abc",
        model_config={"n_caps": 2, "projector": "capsule"},
        extra={"resume_hash": "def"},
    )


def test_checkpoint_roundtrip(state, tmp_path):
    """Testa gravação atômica e leitura de parâmetros, Adam e gerador"""
    path = save_checkpoint(state, str(tmp_path / "ckpt" / "last.ckpt"))
    loaded = load_checkpoint(path)
    for name, value in state.params.items():
        np.testing.assert_array_equal(loaded.params[name], value)
        np.testing.assert_array_equal(loaded.adam.m[name], state.adam.m[name])
    assert loaded.adam.step == 7
    assert (loaded.epoch, loaded.step) == (3, 7)
    assert loaded.extra["resume_hash"] == "def"
    rng = np.random.default_rng()
    rng.bit_generator.state = loaded.rng_state
    expected = np.random.default_rng(1)
    assert rng.integers(0, 1000, size=5).tolist() == expected.integers(0, 1000, size=5).tolist()
    assert not (tmp_path / "ckpt" / "last.ckpt.tmp").exists()


def test_bad_magic_and_truncation(state):
    """Testa StorageError para magic inválido e arquivo truncado"""
    payload = to_bytes(state)
    with pytest.raises(StorageError):
        from_bytes(b"NOPE" + payload[4:])
    with pytest.raises(StorageError):
        from_bytes(payload[:-8])


def test_missing_checkpoint(tmp_path):
    """Testa StorageError para checkpoint inexistente"""
    with pytest.raises(StorageError):
        load_checkpoint(str(tmp_path / "nada.ckpt"))


def test_get_checkpoint_is_cached(state, tmp_path):
    """Testa que get_checkpoint lê o arquivo uma única vez"""
    path = save_checkpoint(state, str(tmp_path / "cached.ckpt"))
    assert get_checkpoint(path) is get_checkpoint(path)
