import json
import logging
import os

from app.errors import UsageError
from app.services.evaluation_service import SOURCES, evaluate_checkpoint
from app.services.runs_service import write_manifest, write_report
from app.services.synthgen_service import load_archive
from models.checkpoint import get_checkpoint

logger = logging.getLogger("Avaliacao")

# subcomando -> (tarefas, nome do relatório)
COMMANDS = {
    "eval-classify": (("classification",), "classification"),
    "eval-rotation": (("rotation", "baselines"), "rotation"),
    "eval-colour": (("colour",), "colour"),
    "eval-retrieval": (("retrieval",), "retrieval"),
}


def _run_dir_of(ckpt_path):
    # <run>/checkpoints/<arquivo>.ckpt
    return os.path.dirname(os.path.dirname(os.path.abspath(ckpt_path)))


def run_evaluation(args):
    """Avalia um checkpoint congelado e grava reports/<tarefa>.json e .csv."""
    tasks, name = COMMANDS[args.command]
    state = get_checkpoint(args.ckpt)
    archive_path = args.archive or state.config.get("archive")
    if not archive_path:
        raise UsageError("checkpoint sem caminho de dataset; informe --archive")
    archive = load_archive(archive_path)
    sources = tuple(s for s in args.sources.split(",") if s) if args.sources else None
    if sources and set(sources) - set(SOURCES):
        raise UsageError(f"fontes inválidas: {sorted(set(sources) - set(SOURCES))}")

    report = evaluate_checkpoint(
        state,
        archive,
        tasks=tasks,
        sources=sources,
        caps_head=getattr(args, "caps_head", False),
        restrict_to_object=not getattr(args, "no_restrict", False),
        probe_epochs=args.probe_epochs,
        seed=args.seed,
    )
    run_dir = args.out or _run_dir_of(args.ckpt)
    json_path, csv_path = write_report(report, os.path.join(run_dir, "reports"), name=name)
    write_manifest(
        run_dir,
        args.command,
        {"tasks": list(tasks), "sources": list(sources or SOURCES), "probe_epochs": args.probe_epochs,
         "seed": args.seed, "checkpoint_config": state.config},
        inputs=[args.ckpt, archive_path],
        outputs={"report": json_path, "csv": csv_path},
    )
    print(json.dumps(report["metrics"], sort_keys=True))
    return report


def register(subparsers):
    for command in COMMANDS:
        parser = subparsers.add_parser(command, help=f"avaliação congelada ({command[5:]})")
        parser.add_argument("--ckpt", required=True, help="caminho do checkpoint")
        parser.add_argument("--archive", help="dataset (padrão: o da config do checkpoint)")
        parser.add_argument("--out", help="diretório da rodada (padrão: o do checkpoint)")
        parser.add_argument("--sources", help=f"subconjunto de {','.join(SOURCES)}")
        parser.add_argument("--probe-epochs", type=int)
        parser.add_argument("--seed", type=int, default=0)
        if command == "eval-classify":
            parser.add_argument("--caps-head", action="store_true", help="adiciona a cabeça de cápsulas")
        if command == "eval-retrieval":
            parser.add_argument("--no-restrict", action="store_true",
                                help="busca em todo o conjunto, não só nas vistas do mesmo objeto")
        parser.set_defaults(handler=run_evaluation)
