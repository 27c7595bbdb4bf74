import logging
import os

import config
from app.services.charts_service import emit_curves
from app.services.runs_service import merge_reports

logger = logging.getLogger("CLI")


def run_report(args):
    """Junta os relatórios de várias rodadas num CSV e, opcionalmente, desenha as curvas."""
    run_dirs = [r for r in args.runs.split(",") if r]
    out_path = args.out or os.path.join(config.RUNS_DIR, "report.csv")
    columns, rows = merge_reports(run_dirs, out_path)
    if args.charts:
        for run_dir in run_dirs:
            emit_curves(os.path.join(run_dir, "log.jsonl"), os.path.join(run_dir, "charts"))
    print(out_path)
    return columns, rows


def register(subparsers):
    parser = subparsers.add_parser("report", help="CSV combinado de várias rodadas")
    parser.add_argument("--runs", required=True, help="diretórios das rodadas, separados por vírgula")
    parser.add_argument("--out", help="CSV de saída (padrão: RUNS_DIR/report.csv)")
    parser.add_argument("--charts", action="store_true", help="gera os SVGs das curvas de cada rodada")
    parser.set_defaults(handler=run_report)
