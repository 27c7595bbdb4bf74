import json
import logging
import os
from dataclasses import fields

import config
from app.errors import UsageError
from app.services.evaluation_service import TASKS
from app.services.runs_service import write_manifest
from app.services.synthgen_service import load_archive
from app.services.train_service import TrainConfig, capsule_sweep, pretrain

logger = logging.getLogger("Treino")


# ============================================================
#  Flags espelhando a TrainConfig
# ============================================================
def _bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "sim"):
        return True
    if value in ("0", "false", "no", "nao", "não"):
        return False
    raise UsageError(f"valor booleano inválido: {text}")


def _int_list(text):
    try:
        return tuple(int(part) for part in str(text).split(",") if part.strip())
    except ValueError as exc:
        raise UsageError(f"lista de inteiros inválida: {text}") from exc


def _flag_type(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, tuple):
        return _int_list
    if isinstance(default, float):
        return float
    if isinstance(default, int) or default is None:
        return int
    return str


def add_config_arguments(parser):
    """Uma flag por campo da TrainConfig (--n-caps, --lambda-inv, ...); ausente = None."""
    parser.add_argument("--config", help="arquivo JSON de configuração")
    for f in fields(TrainConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=_flag_type(f.default), default=None)


def resolve_config(args):
    """JSON do --config + flags; as flags vencem."""
    data = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                data = json.load(f)
        except OSError as exc:
            raise UsageError(f"config não encontrada: {args.config}") from exc
        except ValueError as exc:
            raise UsageError(f"config {args.config} não é JSON válido: {exc}") from exc
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    if "seed" not in data:
        data["seed"] = config.DEFAULT_SEED
    return TrainConfig.from_dict(data)


def _require_archive(train_config):
    if not train_config.archive:
        raise UsageError("informe o dataset com --archive ou na config")
    return train_config.archive


# ============================================================
#  pretrain / sweep
# ============================================================
def run_pretrain(args):
    train_config = resolve_config(args)
    archive_path = _require_archive(train_config)
    archive = load_archive(archive_path)
    run_dir = args.run_dir or os.path.join(config.RUNS_DIR, f"pretrain-{train_config.config_hash()[:8]}")
    result = pretrain(train_config, archive, run_dir=run_dir, resume=args.resume)
    write_manifest(
        run_dir,
        "pretrain",
        train_config.to_dict(),
        inputs=[archive_path] + ([args.resume] if args.resume else []),
        outputs={"checkpoint": os.path.join(run_dir, "checkpoints", "last.ckpt"), "log": os.path.join(run_dir, "log.jsonl")},
    )
    logger.info(f"✅ Rodada gravada em {run_dir}")
    print(os.path.join(run_dir, "checkpoints", "last.ckpt"))
    return result


def run_sweep(args):
    train_config = resolve_config(args)
    archive_path = _require_archive(train_config)
    caps = _int_list(args.caps)
    runs_root = args.runs_root or os.path.join(config.RUNS_DIR, "sweep")
    tasks = tuple(t for t in args.tasks.split(",") if t) if args.tasks else TASKS
    rows = capsule_sweep(train_config, caps, archive_path, runs_root, parallel=args.parallel,
                         tasks=tasks, probe_epochs=args.probe_epochs)
    write_manifest(runs_root, "sweep", {**train_config.to_dict(), "caps": list(caps), "parallel": args.parallel},
                   inputs=[archive_path], outputs={"report": os.path.join(runs_root, "sweep.csv")})
    print(os.path.join(runs_root, "sweep.csv"))
    return rows


def register(subparsers):
    parser = subparsers.add_parser("pretrain", help="pré-treino auto-supervisionado")
    add_config_arguments(parser)
    parser.add_argument("--run-dir", help="diretório da rodada (padrão: RUNS_DIR/pretrain-<hash>)")
    parser.add_argument("--resume", help="checkpoint de onde continuar")
    parser.set_defaults(handler=run_pretrain)

    parser = subparsers.add_parser("sweep", help="uma rodada por número de cápsulas")
    add_config_arguments(parser)
    parser.add_argument("--caps", default="8,16,32", help="lista separada por vírgulas")
    parser.add_argument("--runs-root", help="diretório das rodadas (padrão: RUNS_DIR/sweep)")
    parser.add_argument("--parallel", action="store_true", help="enfileira as rodadas na fila RQ")
    parser.add_argument("--tasks", help=f"subconjunto de {','.join(TASKS)}")
    parser.add_argument("--probe-epochs", type=int)
    parser.set_defaults(handler=run_sweep)
