import csv
import glob
import hashlib
import json
import logging
import os
from typing import NamedTuple

from app.errors import StorageError, UsageError

logger = logging.getLogger("CLI")

REPORT_COLUMNS = ("classification_top1", "rotation_r2", "colour_r2", "mrr", "h_at_1", "h_at_5", "pre")


class RunPaths(NamedTuple):
    root: str
    manifest: str
    log: str
    checkpoints: str
    reports: str
    charts: str


def file_checksum(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def prepare_run_dir(root):
    """Cria o diretório da rodada: manifest.json, log.jsonl, checkpoints/, reports/, charts/."""
    paths = RunPaths(
        root=root,
        manifest=os.path.join(root, "manifest.json"),
        log=os.path.join(root, "log.jsonl"),
        checkpoints=os.path.join(root, "checkpoints"),
        reports=os.path.join(root, "reports"),
        charts=os.path.join(root, "charts"),
    )
    try:
        for directory in (paths.root, paths.checkpoints, paths.reports, paths.charts):
            os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"Falha ao criar {root}: {exc}") from exc
    return paths


def _dump_json(data, path):
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
    except OSError as exc:
        raise StorageError(f"Falha ao gravar {path}: {exc}") from exc
    return path


def write_manifest(run_dir, command, config, inputs=None, outputs=None):
    """Grava manifest.json com a config resolvida e o sha256 de cada entrada."""
    manifest = {
        "command": command,
        "config": config,
        "inputs": {path: file_checksum(path) for path in (inputs or []) if os.path.exists(path)},
        "outputs": outputs or {},
    }
    path = _dump_json(manifest, os.path.join(run_dir, "manifest.json"))
    logger.info(f"Manifest gravado em {path}")
    return path


def read_manifest(run_dir):
    path = os.path.join(run_dir, "manifest.json")
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except (OSError, ValueError) as exc:
        raise StorageError(f"Manifest ilegível em {run_dir}: {exc}") from exc


# ============================================================
#  Log JSON-lines
# ============================================================
class JsonlLog:
    """Log de treino: um objeto JSON por linha, sem emojis nem timestamps."""

    def __init__(self, path, append=False):
        self.path = path
        try:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self._file = open(path, "a" if append else "w", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"Falha ao abrir log {path}: {exc}") from exc

    def write(self, record):
        self._file.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path):
    try:
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except (OSError, ValueError) as exc:
        raise StorageError(f"Falha ao ler log {path}: {exc}") from exc


# ============================================================
#  Relatórios
# ============================================================
def _row(name, metrics):
    extras = sorted(k for k in metrics if k not in REPORT_COLUMNS)
    columns = ["run", *REPORT_COLUMNS, *extras]
    return columns, {"run": name, **{k: metrics.get(k, "") for k in columns[1:]}}


def write_report(report, out_dir, name="evaluation"):
    """Grava <name>.json (relatório completo) e <name>.csv (uma linha de métricas).

    Returns:
        tuple[str, str]: Caminhos do JSON e do CSV.
    """
    os.makedirs(out_dir, exist_ok=True)
    json_path = _dump_json(report, os.path.join(out_dir, f"{name}.json"))
    columns, row = _row(name, report.get("metrics", {}))
    csv_path = os.path.join(out_dir, f"{name}.csv")
    _write_csv(csv_path, columns, [row])
    logger.info(f"✅ Relatório gravado em {json_path}")
    return json_path, csv_path


def _write_csv(path, columns, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise StorageError(f"Falha ao gravar {path}: {exc}") from exc


def collect_metrics(run_dir):
    """Une as métricas de todos os reports/*.json de uma rodada."""
    metrics = {}
    for path in sorted(glob.glob(os.path.join(run_dir, "reports", "*.json"))):
        with open(path, encoding="utf-8") as f:
            metrics.update(json.load(f).get("metrics", {}))
    return metrics


def merge_reports(run_dirs, out_path=None):
    """Uma linha por rodada, colunas com os nomes das métricas de avaliação.

    Raises:
        UsageError: Lista vazia ou rodada sem relatórios.
    """
    if not run_dirs:
        raise UsageError("report: nenhuma rodada informada")
    rows, extras = [], set()
    for run_dir in run_dirs:
        metrics = collect_metrics(run_dir)
        if not metrics:
            raise UsageError(f"report: {run_dir} não tem relatórios em reports/")
        extras.update(k for k in metrics if k not in REPORT_COLUMNS)
        rows.append({"run": os.path.basename(os.path.normpath(run_dir)), **metrics})
    columns = ["run", *REPORT_COLUMNS, *sorted(extras)]
    rows = [{k: row.get(k, "") for k in columns} for row in rows]
    if out_path:
        _write_csv(out_path, columns, rows)
        logger.info(f"✅ Relatório combinado com {len(rows)} rodada(s) em {out_path}")
    return columns, rows
