import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple

import cv2
import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from app.errors import ContractError, ParameterError, StorageError
from app.services.rotations_service import (
    Quaternion,
    TaitBryanAngles,
    angles_to_matrix,
    quaternions_from_angles,
    relative_quaternions,
    sample_angles,
)

logger = logging.getLogger("Dataset")

MAGIC = b"CIE1"
GENERATOR_VERSION = "1.0"
DEFAULT_IMAGE_SIZE = 32
VERTEX_JITTER = 0.06


# ============================================================
#  Templates poliédricos (um por classe)
# ============================================================
def _prism(polygon, half_height):
    polygon = np.asarray(polygon, np.float64)
    n = len(polygon)
    bottom = np.column_stack([polygon, np.full(n, -half_height)])
    top = np.column_stack([polygon, np.full(n, half_height)])
    vertices = np.vstack([bottom, top])
    edges = [(i, (i + 1) % n) for i in range(n)]
    edges += [(n + i, n + (i + 1) % n) for i in range(n)]
    edges += [(i, n + i) for i in range(n)]
    return vertices, edges


def _regular_polygon(n, radius=1.0, phase=math.pi / 2):
    return [(radius * math.cos(phase + 2 * math.pi * k / n), radius * math.sin(phase + 2 * math.pi * k / n))
            for k in range(n)]


def _tetrahedron():
    vertices = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], np.float64)
    edges = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    return vertices, edges


def _cube():
    vertices = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], np.float64)
    edges = [(i, j) for i in range(8) for j in range(i + 1, 8)
             if np.sum(vertices[i] != vertices[j]) == 1]
    return vertices, edges


def _octahedron():
    vertices = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], np.float64)
    edges = [(i, j) for i in range(6) for j in range(i + 1, 6)
             if not np.allclose(vertices[i], -vertices[j])]
    return vertices, edges


def _square_pyramid():
    base = np.array([[1, 1, -0.7], [-1, 1, -0.7], [-1, -1, -0.7], [1, -1, -0.7]], np.float64)
    vertices = np.vstack([base, [[0, 0, 1.1]]])
    edges = [(i, (i + 1) % 4) for i in range(4)] + [(i, 4) for i in range(4)]
    return vertices, edges


def _l_shape():
    return _prism([(0, 0), (2, 0), (2, 1), (1, 1), (1, 3), (0, 3)], 0.5)


def _cross_shape():
    outline = [(1, 0), (2, 0), (2, 1), (3, 1), (3, 2), (2, 2), (2, 3), (1, 3), (1, 2), (0, 2), (0, 1), (1, 1)]
    return _prism(outline, 0.5)


def _normalized(builder):
    vertices, edges = builder()
    vertices = vertices - vertices.mean(axis=0)
    vertices = vertices / np.max(np.linalg.norm(vertices, axis=1))
    return vertices, tuple(edges)


TEMPLATES = (
    ("tetrahedron", _normalized(_tetrahedron)),
    ("cube", _normalized(_cube)),
    ("octahedron", _normalized(_octahedron)),
    ("triangular_prism", _normalized(lambda: _prism(_regular_polygon(3), 0.9))),
    ("square_pyramid", _normalized(_square_pyramid)),
    ("pentagonal_prism", _normalized(lambda: _prism(_regular_polygon(5), 0.7))),
    ("l_shape", _normalized(_l_shape)),
    ("cross_shape", _normalized(_cross_shape)),
)


def object_geometry(class_id, object_seed):
    """Vértices (com jitter da instância) e arestas da classe.

    Raises:
        ParameterError: class_id fora de [0, len(TEMPLATES)).
    """
    if not 0 <= int(class_id) < len(TEMPLATES):
        raise ParameterError(f"class_id={class_id} inválido (0..{len(TEMPLATES) - 1})")
    _, (vertices, edges) = TEMPLATES[int(class_id)]
    rng = np.random.default_rng(int(object_seed))
    jitter = rng.normal(0.0, VERTEX_JITTER, size=vertices.shape)
    return vertices + jitter, edges


# ============================================================
#  Tipos
# ============================================================
@dataclass(frozen=True)
class SceneParams:
    """Fatores latentes de uma vista.

    Args:
        class_id (int): Classe do objeto.
        object_seed (int): Semente do jitter da instância.
        angles (TaitBryanAngles): Rotação do objeto.
        quaternion (Quaternion): A mesma rotação como quaternion unitário.
        floor_hue (float): Matiz do fundo, em [0, 1].
        light_hue (float): Matiz do objeto, em [0, 1].
        light_theta (float): Elevação da luz, em [0, pi/4] (só armazenada).
        light_phi (float): Azimute da luz, em [0, 2*pi] (só armazenado).
    """

    class_id: int
    object_seed: int
    angles: TaitBryanAngles
    quaternion: Quaternion
    floor_hue: float = 0.0
    light_hue: float = 0.0
    light_theta: float = 0.0
    light_phi: float = 0.0

    def __post_init__(self):
        checks = (
            ("floor_hue", self.floor_hue, 0.0, 1.0),
            ("light_hue", self.light_hue, 0.0, 1.0),
            ("light_theta", self.light_theta, 0.0, math.pi / 4),
            ("light_phi", self.light_phi, 0.0, 2 * math.pi),
        )
        for name, value, low, high in checks:
            if not low - 1e-6 <= value <= high + 1e-6:
                raise ParameterError(f"{name}={value} fora de [{low}, {high}]")


# ============================================================
#  Renderização
# ============================================================
def project_points(points, size):
    """Projeção ortográfica: (x, y) -> (coluna, linha) em pixels.

    A origem cai no centro da imagem, ((size - 1)/2, (size - 1)/2).
    """
    points = np.atleast_2d(points)
    center = (size - 1) / 2.0
    scale = 0.42 * size
    cols = center + scale * points[:, 0]
    rows = center - scale * points[:, 1]
    return np.column_stack([cols, rows])


def render_view(class_id, object_seed, params, size=DEFAULT_IMAGE_SIZE):
    """Rasteriza o wireframe rotacionado da instância.

    As arestas são desenhadas da mais distante para a mais próxima, com brilho
    proporcional à profundidade; a cor vem de light_hue e o fundo de floor_hue.

    Returns:
        np.ndarray: Imagem float32 3×H×W com valores em [0, 1].

    Raises:
        ParameterError: class_id inválido.
    """
    vertices, edges = object_geometry(class_id, object_seed)
    rotation = angles_to_matrix(params.angles.as_array())
    rotated = vertices @ rotation.T
    pixels = project_points(rotated, size)
    depth = rotated[:, 2]

    background = hsv_to_rgb([params.floor_hue, 0.45, 0.35])
    foreground = hsv_to_rgb([params.light_hue, 0.85, 1.0])
    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = background

    order = sorted(range(len(edges)), key=lambda e: (depth[edges[e][0]] + depth[edges[e][1]], e))
    for e in order:
        i, j = edges[e]
        shade = 0.35 + 0.65 * float(np.clip((depth[i] + depth[j]) / 4.0 + 0.5, 0.0, 1.0))
        color = tuple(float(c) for c in foreground * shade)
        p1 = tuple(int(round(v)) for v in pixels[i])
        p2 = tuple(int(round(v)) for v in pixels[j])
        cv2.line(image, p1, p2, color, thickness=1, lineType=cv2.LINE_8)
    return np.ascontiguousarray(image.transpose(2, 0, 1))


# ============================================================
#  Arquivo do dataset
# ============================================================
def record_dtype(size):
    return np.dtype([
        ("image", "<f4", (size, size, 3)),
        ("class_id", "<u4"),
        ("object_id", "<u4"),
        ("angles", "<f4", (3,)),
        ("quaternion", "<f4", (4,)),
        ("factors", "<f4", (4,)),
    ])


def _manifest_bytes(manifest):
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class DatasetArchive:
    """Vistas renderizadas + fatores latentes.

    Layout binário: magic "CIE1", u32 LE com o tamanho do manifest, manifest
    JSON UTF-8 e os registros em ordem (objeto, vista), com a imagem
    intercalada por pixel (H×W×3 float32 LE).
    """

    manifest: dict
    records: np.ndarray

    @property
    def num_classes(self):
        return int(self.manifest["num_classes"])

    @property
    def n_views(self):
        return int(self.manifest["n_views"])

    @property
    def n_objects(self):
        return int(self.manifest["n_objects"])

    @property
    def image_size(self):
        return int(self.manifest["image_size"])

    def __len__(self):
        return len(self.records)

    def to_bytes(self):
        header = _manifest_bytes(self.manifest)
        return MAGIC + struct.pack("<I", len(header)) + header + self.records.tobytes()

    @classmethod
    def from_bytes(cls, payload):
        if payload[:4] != MAGIC:
            raise StorageError("Arquivo não é um DatasetArchive (magic inválido)")
        (length,) = struct.unpack("<I", payload[4:8])
        try:
            manifest = json.loads(payload[8:8 + length].decode("utf-8"))
        except ValueError as exc:
            raise StorageError(f"Manifest corrompido: {exc}") from exc
        dtype = record_dtype(int(manifest["image_size"]))
        body = payload[8 + length:]
        expected = int(manifest["n_objects"]) * int(manifest["n_views"])
        if len(body) != expected * dtype.itemsize:
            raise StorageError(f"Tamanho inesperado: {len(body)} bytes para {expected} registros")
        records = np.frombuffer(body, dtype=dtype).copy()
        return cls(manifest=manifest, records=records)

    def save(self, path):
        try:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "wb") as f:
                f.write(self.to_bytes())
        except OSError as exc:
            raise StorageError(f"Falha ao gravar {path}: {exc}") from exc
        logger.info(f"✅ Dataset salvo em {path} ({len(self)} registros)")
        return path

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as f:
                payload = f.read()
        except OSError as exc:
            raise StorageError(f"Falha ao ler {path}: {exc}") from exc
        return cls.from_bytes(payload)

    def checksum(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    # ---- consultas ----
    def view_indices(self, object_id):
        start = int(object_id) * self.n_views
        return np.arange(start, start + self.n_views)

    def object_ids(self, split="all"):
        """IDs de objeto do split ('train', 'val' ou 'all')."""
        per_class = int(self.manifest["objects_per_class"])
        n_val = int(per_class * float(self.manifest.get("val_fraction", 0.0)))
        ids = np.arange(self.n_objects)
        in_val = (ids % per_class) >= per_class - n_val
        if split == "all":
            return ids
        if split == "val":
            return ids[in_val]
        if split == "train":
            return ids[~in_val]
        raise ParameterError(f"split desconhecido: {split}")

    def record_indices(self, object_ids):
        object_ids = np.asarray(object_ids, dtype=np.int64)
        return (object_ids[:, None] * self.n_views + np.arange(self.n_views)[None, :]).reshape(-1)

    def images(self, indices):
        """Vistas no formato do encoder, N×3×H×W (no arquivo ficam H×W×3)."""
        return np.ascontiguousarray(self.records["image"][np.asarray(indices)].transpose(0, 3, 1, 2))

    def scene_params(self, index):
        record = self.records[int(index)]
        angles = TaitBryanAngles(*(float(a) for a in record["angles"]))
        floor_hue, light_hue, theta, phi = (float(v) for v in record["factors"])
        return SceneParams(
            class_id=int(record["class_id"]),
            object_seed=int(self.manifest["object_seeds"][int(record["object_id"])]),
            angles=angles,
            quaternion=Quaternion.from_array(record["quaternion"]),
            floor_hue=floor_hue,
            light_hue=light_hue,
            light_theta=theta,
            light_phi=phi,
        )


def generate_dataset(num_classes=8, objects_per_class=20, n_views=8, size=DEFAULT_IMAGE_SIZE,
                     seed=0, val_fraction=0.25, path=None):
    """Gera o dataset procedural completo.

    Args:
        num_classes (int): Número de classes (até len(TEMPLATES)).
        objects_per_class (int): Instâncias por classe.
        n_views (int): Vistas por instância.
        size (int): Lado da imagem em pixels.
        seed (int): Semente global; o manifest basta para regenerar os mesmos bytes.
        val_fraction (float): Fração de objetos de cada classe reservada para validação.
        path (str, optional): Se informado, grava o arquivo.

    Returns:
        DatasetArchive

    Raises:
        ParameterError: Contagens < 1 ou classes acima do número de templates.
        StorageError: Falha de escrita.
    """
    for name, value in (("num_classes", num_classes), ("objects_per_class", objects_per_class),
                        ("n_views", n_views), ("size", size)):
        if int(value) < 1:
            raise ParameterError(f"{name} deve ser >= 1, recebeu {value}")
    if num_classes > len(TEMPLATES):
        raise ParameterError(f"num_classes={num_classes} excede os {len(TEMPLATES)} templates")

    rng = np.random.default_rng(seed)
    n_objects = num_classes * objects_per_class
    records = np.zeros(n_objects * n_views, dtype=record_dtype(size))
    object_seeds = []

    logger.info(f"Gerando {n_objects} objetos x {n_views} vistas ({size}x{size}, seed={seed}) ...")
    for object_id in range(n_objects):
        class_id = object_id // objects_per_class
        object_seed = int(rng.integers(0, 2 ** 31 - 1))
        object_seeds.append(object_seed)
        angles = sample_angles(rng, n_views).astype(np.float32)
        quats = quaternions_from_angles(angles.astype(np.float64))
        hues = rng.uniform(0.0, 1.0, size=(n_views, 2))
        thetas = rng.uniform(0.0, math.pi / 4, size=n_views)
        phis = rng.uniform(0.0, 2 * math.pi, size=n_views)
        for view in range(n_views):
            idx = object_id * n_views + view
            factors = np.array([hues[view, 0], hues[view, 1], thetas[view], phis[view]], dtype=np.float32)
            params = SceneParams(
                class_id=class_id,
                object_seed=object_seed,
                angles=TaitBryanAngles(*(float(a) for a in angles[view])),
                quaternion=Quaternion.from_array(quats[view]),
                floor_hue=float(factors[0]),
                light_hue=float(factors[1]),
                light_theta=float(factors[2]),
                light_phi=float(factors[3]),
            )
            records["image"][idx] = render_view(class_id, object_seed, params, size).transpose(1, 2, 0)
            records["class_id"][idx] = class_id
            records["object_id"][idx] = object_id
            records["angles"][idx] = angles[view]
            records["quaternion"][idx] = quats[view]
            records["factors"][idx] = factors

    manifest = {
        "format": "CIE1",
        "generator_version": GENERATOR_VERSION,
        "num_classes": int(num_classes),
        "class_names": [TEMPLATES[c][0] for c in range(num_classes)],
        "objects_per_class": int(objects_per_class),
        "n_objects": int(n_objects),
        "n_views": int(n_views),
        "image_size": int(size),
        "seed": int(seed),
        "val_fraction": float(val_fraction),
        "object_seeds": object_seeds,
        "pairing": "resampled_each_epoch",
    }
    archive = DatasetArchive(manifest=manifest, records=records)
    if path:
        archive.save(path)
    return archive


def load_archive(path):
    """Lê um DatasetArchive gravado por `generate_dataset`.

    Raises:
        StorageError: Arquivo ausente, magic inválido ou tamanho inconsistente.
    """
    archive = DatasetArchive.load(path)
    logger.info(f"Dataset carregado de {path} ({len(archive)} registros)")
    return archive


# ============================================================
#  Pares de treino
# ============================================================
class TrainingPair(NamedTuple):
    object_id: int
    index_a: int
    index_b: int
    view_a: np.ndarray
    view_b: np.ndarray
    g_rel: Quaternion
    class_id: int


def sample_training_pair(archive, rng, object_id=None):
    """Sorteia duas vistas distintas de um mesmo objeto.

    Returns:
        TrainingPair: Inclui g_rel = relative_rotation(q_a, q_b).

    Raises:
        ContractError: Se o objeto tiver menos de duas vistas.
    """
    if archive.n_views < 2:
        raise ContractError("sample_training_pair exige ao menos 2 vistas por objeto")
    if object_id is None:
        object_id = int(rng.integers(0, archive.n_objects))
    view_a, view_b = rng.choice(archive.n_views, size=2, replace=False)
    index_a = int(object_id) * archive.n_views + int(view_a)
    index_b = int(object_id) * archive.n_views + int(view_b)
    rec_a, rec_b = archive.records[index_a], archive.records[index_b]
    g_rel = relative_quaternions(rec_a["quaternion"].astype(np.float64), rec_b["quaternion"].astype(np.float64))[0]
    return TrainingPair(
        object_id=int(object_id),
        index_a=index_a,
        index_b=index_b,
        view_a=np.ascontiguousarray(rec_a["image"].transpose(2, 0, 1)),
        view_b=np.ascontiguousarray(rec_b["image"].transpose(2, 0, 1)),
        g_rel=Quaternion.from_array(g_rel),
        class_id=int(rec_a["class_id"]),
    )


def sample_epoch_pairs(archive, rng, object_ids):
    """Um par (a, b) de vistas distintas por objeto, reamostrado a cada época.

    Returns:
        tuple[np.ndarray, np.ndarray]: Índices de registro das vistas A e B.
    """
    if archive.n_views < 2:
        raise ContractError("pares exigem ao menos 2 vistas por objeto")
    object_ids = np.asarray(object_ids, dtype=np.int64)
    first = rng.integers(0, archive.n_views, size=len(object_ids))
    offset = rng.integers(1, archive.n_views, size=len(object_ids))
    second = (first + offset) % archive.n_views
    base = object_ids * archive.n_views
    return base + first, base + second


def pair_relative_quaternions(archive, index_a, index_b):
    q = archive.records["quaternion"].astype(np.float64)
    return relative_quaternions(q[np.asarray(index_a)], q[np.asarray(index_b)])


def save_preview(archive, path, object_id=0, scale=4):
    """Grava um PNG com todas as vistas de um objeto lado a lado."""
    images = archive.images(archive.view_indices(object_id))
    strip = np.concatenate([img.transpose(1, 2, 0) for img in images], axis=1)
    pixels = (np.clip(strip, 0.0, 1.0) * 255).astype(np.uint8)
    preview = Image.fromarray(pixels).resize((pixels.shape[1] * scale, pixels.shape[0] * scale), Image.NEAREST)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    preview.save(path)
    return path
