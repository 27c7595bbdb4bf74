"""Container de checkpoint.

Layout: magic "CIEK", u32 LE com o tamanho do manifest, manifest JSON e os
blocos float32 little-endian na ordem listada em manifest["blocks"].
Blocos: "param/<nome>", "adam_m/<nome>" e "adam_v/<nome>".
"""
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from app.errors import StorageError
from models.optim import AdamState

logger = logging.getLogger("Checkpoint")

MAGIC = b"CIEK"
FORMAT_VERSION = 1

_cache = {}
_lock = threading.Lock()


@dataclass
class CheckpointState:
    """Tudo o que o pré-treino precisa para continuar exatamente de onde parou."""

    params: dict
    adam: AdamState
    epoch: int
    step: int
    rng_state: dict
    config: dict
    config_hash: str
    model_config: dict
    extra: dict = field(default_factory=dict)


def _manifest_bytes(manifest):
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(state):
    blocks, payloads, offset = [], [], 0
    groups = (("param", state.params), ("adam_m", state.adam.m), ("adam_v", state.adam.v))
    for kind, arrays in groups:
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype="<f4")
            blocks.append({"name": f"{kind}/{name}", "shape": list(data.shape), "offset": offset})
            payloads.append(data.tobytes())
            offset += data.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "epoch": int(state.epoch),
        "step": int(state.step),
        "config": state.config,
        "config_hash": state.config_hash,
        "model_config": state.model_config,
        "adam": state.adam.hyperparameters(),
        "rng_state": state.rng_state,
        "extra": state.extra,
        "blocks": blocks,
    }
    header = _manifest_bytes(manifest)
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(payloads)


def from_bytes(payload):
    if payload[:4] != MAGIC:
        raise StorageError("Arquivo não é um checkpoint (magic inválido)")
    (length,) = struct.unpack("<I", payload[4:8])
    try:
        manifest = json.loads(payload[8:8 + length].decode("utf-8"))
    except ValueError as exc:
        raise StorageError(f"Manifest do checkpoint corrompido: {exc}") from exc
    body = memoryview(payload)[8 + length:]
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for block in manifest["blocks"]:
        kind, name = block["name"].split("/", 1)
        count = int(np.prod(block["shape"])) if block["shape"] else 1
        start = int(block["offset"])
        if start + 4 * count > len(body):
            raise StorageError(f"Checkpoint truncado no bloco {block['name']}")
        array = np.frombuffer(body[start:start + 4 * count], dtype="<f4").reshape(block["shape"])
        groups[kind][name] = array.astype(np.float32)
    adam = manifest["adam"]
    return CheckpointState(
        params=groups["param"],
        adam=AdamState(lr=adam["lr"], beta1=adam["beta1"], beta2=adam["beta2"], eps=adam["eps"],
                       step=adam["step"], m=groups["adam_m"], v=groups["adam_v"]),
        epoch=manifest["epoch"],
        step=manifest["step"],
        rng_state=manifest["rng_state"],
        config=manifest["config"],
        config_hash=manifest["config_hash"],
        model_config=manifest["model_config"],
        extra=manifest.get("extra", {}),
    )


def save_checkpoint(state, path):
    """Grava o checkpoint de forma atômica (arquivo temporário + rename).

    Raises:
        StorageError: Falha de escrita.
    """
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as f:
            f.write(to_bytes(state))
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"Falha ao gravar checkpoint {path}: {exc}") from exc
    logger.info(f"✅ Checkpoint salvo em {path} (época {state.epoch}, passo {state.step})")
    return path


def load_checkpoint(path):
    """Raises:
        StorageError: Arquivo ausente ou inválido.
    """
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as exc:
        raise StorageError(f"Falha ao ler checkpoint {path}: {exc}") from exc
    return from_bytes(payload)


def get_checkpoint(path):
    """Carrega um checkpoint uma vez por processo (cache com lock)."""
    key = os.path.abspath(path)
    if key not in _cache:
        with _lock:
            if key not in _cache:
                logger.info(f"Carregando checkpoint {path} ...")
                _cache[key] = load_checkpoint(path)
                logger.info("Checkpoint carregado.")
    return _cache[key]
