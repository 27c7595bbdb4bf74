import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from app.errors import ContractError, ParameterError, shape_mismatch
from app.services.rotations_service import relative_quaternions, rotation_distances
from models import ndcore

logger = logging.getLogger("Retrieval")

SPLITS = {
    "train-train": ("train", "train"),
    "val-val": ("val", "val"),
    "val-all": ("val", "all"),
}


@dataclass
class RetrievalReport:
    """MRR, H@k e PRE de um par (fonte, conjunto de busca).

    `hits` guarda todos os k pedidos; h_at_1 e h_at_5 são os dois da tabela.
    """

    mrr: float
    h_at_1: float
    h_at_5: float
    pre: float
    source_split: str = "all"
    retrieval_split: str = "all"
    n_queries: int = 0
    skipped_objects: int = 0
    hits: dict = field(default_factory=dict)

    def to_dict(self):
        data = asdict(self)
        data["hits"] = {str(k): v for k, v in self.hits.items()}
        return data


# ============================================================
#  Preditores
# ============================================================
def identity_predictor(z, g):
    return np.asarray(z)


def random_predictor(seed=0):
    """Ignora a entrada e devolve vetores gaussianos (baseline aleatório)."""
    rng = np.random.default_rng(seed)

    def predictor(z, g):
        return rng.normal(size=np.shape(z)).astype(np.float32)

    return predictor


# ============================================================
#  Métricas
# ============================================================
def target_rank(distances, target):
    """Posição do alvo entre as distâncias (1 = mais próximo).

    Empates são desfeitos pelo índice: quem tem índice menor fica à frente.
    """
    d_t = distances[target]
    ahead = np.sum(distances < d_t) + np.sum(distances[:target] == d_t)
    return int(ahead) + 1


def _masks(n, source_mask, retrieval_mask):
    source = np.ones(n, dtype=bool) if source_mask is None else np.asarray(source_mask, dtype=bool)
    gallery = np.ones(n, dtype=bool) if retrieval_mask is None else np.asarray(retrieval_mask, dtype=bool)
    return source, gallery


def retrieval_metrics(embeddings, object_ids, quaternions, predictor, k_list=(1, 5),
                      source_mask=None, retrieval_mask=None, restrict_to_object=True,
                      source_split="all", retrieval_split="all"):
    """MRR, H@k e PRE prevendo a vista alvo a partir da vista fonte.

    Para cada par ordenado (fonte s, alvo t) de vistas distintas de um mesmo
    objeto, o embedding previsto é predictor(z_s, g_rel) com
    g_rel = q_t ⊗ q_s⁻¹. A galeria são as vistas do mesmo objeto no conjunto
    de busca (incluindo a própria fonte); com restrict_to_object=False é o
    conjunto de busca inteiro. Distância euclidiana exata.

    Args:
        embeddings (np.ndarray): N × D (embeddings de pose).
        object_ids (np.ndarray): Objeto de cada linha.
        quaternions (np.ndarray): N × 4, rotação absoluta de cada vista.
        predictor (callable): predictor(Z, G) -> Z, em lote.
        k_list (tuple[int]): Valores de k para H@k.

    Returns:
        RetrievalReport

    Raises:
        DimensionError: Número de linhas inconsistente.
        ParameterError: k < 1.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    object_ids = np.asarray(object_ids)
    q = np.asarray(quaternions, dtype=np.float64)
    if not len(z) == len(object_ids) == len(q):
        raise shape_mismatch("retrieval_metrics", z.shape, q.shape)
    k_list = tuple(int(k) for k in k_list)
    if any(k < 1 for k in k_list):
        raise ParameterError(f"k deve ser >= 1: {k_list}")
    source, gallery = _masks(len(z), source_mask, retrieval_mask)

    reciprocal, hits, errors = [], {k: [] for k in k_list}, []
    skipped = 0
    for obj in np.unique(object_ids[source]):
        src_idx = np.flatnonzero(source & (object_ids == obj))
        own_gallery = np.flatnonzero(gallery & (object_ids == obj))
        gal_idx = own_gallery if restrict_to_object else np.flatnonzero(gallery)
        if len(np.union1d(src_idx, own_gallery)) < 2:
            skipped += 1
            continue
        pairs = [(s, t) for s in src_idx for t in own_gallery if s != t]
        if not pairs:
            skipped += 1
            continue
        s_idx = np.array([p[0] for p in pairs])
        t_idx = np.array([p[1] for p in pairs])
        g_rel = relative_quaternions(q[s_idx], q[t_idx])
        predicted = np.asarray(predictor(z[s_idx].astype(np.float32), g_rel), dtype=np.float64)
        distances = cdist(predicted, z[gal_idx])
        position = {int(idx): i for i, idx in enumerate(gal_idx)}
        for row, t in enumerate(t_idx):
            rank = target_rank(distances[row], position[int(t)])
            reciprocal.append(1.0 / rank)
            for k in k_list:
                hits[k].append(1.0 if rank <= k else 0.0)
            nearest = gal_idx[int(np.argmin(distances[row]))]
            errors.append(float(rotation_distances(q[nearest], q[t])))

    if skipped:
        logger.warning(f"⚠️ {skipped} objeto(s) com menos de 2 vistas ignorado(s) no retrieval")
    if not reciprocal:
        raise ContractError("retrieval_metrics: nenhum objeto com ao menos 2 vistas")
    hit_rates = {k: float(np.mean(v)) for k, v in hits.items()}
    report = RetrievalReport(
        mrr=float(np.mean(reciprocal)),
        h_at_1=hit_rates.get(1, float("nan")),
        h_at_5=hit_rates.get(5, float("nan")),
        pre=float(np.mean(errors)),
        source_split=source_split,
        retrieval_split=retrieval_split,
        n_queries=len(reciprocal),
        skipped_objects=skipped,
        hits=hit_rates,
    )
    logger.info(
        f"🔍 {source_split}-{retrieval_split}: MRR={report.mrr:.4f} H@1={report.h_at_1:.4f} "
        f"H@5={report.h_at_5:.4f} PRE={report.pre:.4f} ({report.n_queries} consultas)"
    )
    return report


def split_masks(split_labels, split):
    """Máscaras (fonte, busca) de um split 'train-train', 'val-val' ou 'val-all'.

    Args:
        split_labels (np.ndarray): 'train' ou 'val' por linha.
    """
    if split not in SPLITS:
        raise ParameterError(f"split de retrieval desconhecido: {split}")
    labels = np.asarray(split_labels)
    source_name, retrieval_name = SPLITS[split]
    source = labels == source_name
    retrieval = np.ones(len(labels), dtype=bool) if retrieval_name == "all" else labels == retrieval_name
    return source, retrieval


def pre_metric(embeddings, object_ids, quaternions, predictor, split_labels=None, split="val-all",
               restrict_to_object=True):
    """Erro médio de rotação (1 - <q_nn, q_t>²) do vizinho mais próximo da predição."""
    if split_labels is None:
        source, retrieval = None, None
        source_name = retrieval_name = "all"
    else:
        source, retrieval = split_masks(split_labels, split)
        source_name, retrieval_name = SPLITS[split]
    report = retrieval_metrics(
        embeddings, object_ids, quaternions, predictor,
        source_mask=source, retrieval_mask=retrieval, restrict_to_object=restrict_to_object,
        source_split=source_name, retrieval_split=retrieval_name,
    )
    return report.pre


def model_predictor(model):
    """Adapta o preditor treinado para a assinatura predictor(Z, G) -> Z."""
    def predictor(z, g):
        with ndcore.no_grad():
            out = []
            for start in range(0, len(z), 512):
                out.append(model.predictor(ndcore.Tensor(z[start:start + 512]), g[start:start + 512]).data)
        return np.concatenate(out) if out else np.zeros_like(z)

    return predictor
