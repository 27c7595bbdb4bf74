import logging
import os

import matplotlib
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

from app.errors import StorageError, UsageError
from app.services.runs_service import read_log

logger = logging.getLogger("Graficos")

# SVG reprodutível: mesmos dados -> mesmos bytes.
SVG_PARAMS = {
    "svg.hashsalt": "capsie",
    "svg.fonttype": "none",
    "path.simplify": False,
}
LABELS = {
    "classification_top1": "Top-1 (classificação)",
    "rotation_r2": "R² (rotação)",
}


def eval_records(records):
    return [r for r in records if r.get("type") == "eval"]


def build_curve_figure(xs, ys, metric):
    """Figura de uma métrica contra a época; eixos cobrem exatamente [min, max] da série."""
    figure = Figure(figsize=(6, 4))
    FigureCanvasSVG(figure)
    ax = figure.add_subplot(1, 1, 1)
    ax.plot(xs, ys, color="#1f77b4", gid=f"series-{metric}")
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    # série constante: intervalo mínimo
    ax.set_xlim(x_lo, x_hi if x_hi > x_lo else x_lo + 1)
    ax.set_ylim(y_lo, y_hi if y_hi > y_lo else y_lo + 1e-6)
    ax.set_xlabel("época")
    ax.set_ylabel(LABELS.get(metric, metric))
    ax.set_title(metric)
    ax.grid(True, alpha=0.3)
    return figure


def emit_curves(log, out_dir):
    """Um SVG por métrica de avaliação online do log de treino.

    Args:
        log (str | list[dict]): Caminho do log.jsonl ou os registros já lidos.
        out_dir (str): Diretório de saída.

    Returns:
        list[str]: Caminhos dos SVGs, em ordem alfabética de métrica.

    Raises:
        UsageError: Log sem registros de avaliação.
    """
    records = read_log(log) if isinstance(log, str) else list(log)
    evals = eval_records(records)
    if not evals:
        raise UsageError("charts: log não tem registros de avaliação")
    metrics = sorted({k for r in evals for k in r if k not in ("type", "epoch", "step")})
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    with matplotlib.rc_context(SVG_PARAMS):
        for metric in metrics:
            points = [(r["epoch"], r[metric]) for r in evals if r.get(metric) is not None]
            if not points:
                continue
            xs, ys = zip(*points)
            figure = build_curve_figure(list(xs), list(ys), metric)
            path = os.path.join(out_dir, f"{metric}.svg")
            try:
                figure.savefig(path, format="svg", metadata={"Date": None})
            except OSError as exc:
                raise StorageError(f"Falha ao gravar {path}: {exc}") from exc
            paths.append(path)
    logger.info(f"✅ {len(paths)} gráfico(s) em {out_dir}")
    return paths
