import os
import struct

import numpy as np
import pytest

from app.errors import ParameterError, StorageError
from app.services.rotations_service import Quaternion, TaitBryanAngles, hamilton_product, quaternions_from_angles
from app.services.synthgen_service import (
    TEMPLATES,
    DatasetArchive,
    SceneParams,
    generate_dataset,
    load_archive,
    object_geometry,
    pair_relative_quaternions,
    project_points,
    render_view,
    sample_epoch_pairs,
    sample_training_pair,
    save_preview,
)


@pytest.fixture(scope="module")
def archive():
    """Dataset mínimo: 2 classes x 4 objetos x 3 vistas, 16x16"""
    return generate_dataset(num_classes=2, objects_per_class=4, n_views=3, size=16, seed=3)


def test_same_seed_same_bytes(archive):
    """Testa determinismo: mesma semente -> mesmo checksum"""
    again = generate_dataset(num_classes=2, objects_per_class=4, n_views=3, size=16, seed=3)
    other = generate_dataset(num_classes=2, objects_per_class=4, n_views=3, size=16, seed=4)
    assert again.checksum() == archive.checksum()
    assert other.checksum() != archive.checksum()


def test_records_and_factors(archive):
    """Testa shapes, faixa dos pixels e quaternions unitários"""
    assert len(archive) == 24
    images = archive.images(np.arange(len(archive)))
    assert images.shape == (24, 3, 16, 16)
    assert images.min() >= 0.0 and images.max() <= 1.0
    norms = np.linalg.norm(archive.records["quaternion"], axis=1)
    np.testing.assert_allclose(norms, np.ones(24), atol=1e-5)
    assert np.all(np.abs(archive.records["angles"]) <= np.pi / 2 + 1e-6)
    np.testing.assert_array_equal(archive.records["class_id"][:12], np.zeros(12))


def test_stored_quaternion_matches_angles(archive):
    """Testa que o quaternion gravado corresponde aos ângulos gravados"""
    expected = quaternions_from_angles(archive.records["angles"].astype(np.float64))
    dots = np.abs(np.sum(expected * archive.records["quaternion"], axis=1))
    np.testing.assert_allclose(dots, np.ones(len(archive)), atol=1e-5)


def test_views_of_an_object_differ(archive):
    """Testa que vistas diferentes do mesmo objeto geram imagens diferentes"""
    views = archive.images(archive.view_indices(0))
    assert not np.allclose(views[0], views[1])


def test_object_level_split(archive):
    """Testa split treino/val por objeto (último objeto de cada classe vai para val)"""
    np.testing.assert_array_equal(archive.object_ids("val"), [3, 7])
    assert len(archive.object_ids("train")) == 6
    with pytest.raises(ParameterError):
        archive.object_ids("test")


def test_save_and_load(archive, tmp_path):
    """Testa gravação e leitura preservando o checksum"""
    path = archive.save(str(tmp_path / "dataset.ciea"))
    assert load_archive(path).checksum() == archive.checksum()


def test_bad_magic_rejected(tmp_path):
    """Testa StorageError para arquivo que não é dataset"""
    path = tmp_path / "lixo.bin"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(StorageError):
        load_archive(str(path))
    with pytest.raises(StorageError):
        load_archive(str(tmp_path / "inexistente.ciea"))


def test_truncated_archive_rejected(archive):
    """Testa StorageError para arquivo truncado"""
    with pytest.raises(StorageError):
        DatasetArchive.from_bytes(archive.to_bytes()[:-10])


def test_training_pair_uses_distinct_views(archive):
    """Testa par de treino: mesmo objeto, vistas distintas e g_rel consistente"""
    rng = np.random.default_rng(0)
    for _ in range(20):
        pair = sample_training_pair(archive, rng)
        assert pair.index_a != pair.index_b
        assert pair.index_a // archive.n_views == pair.index_b // archive.n_views == pair.object_id
        q_a = archive.records["quaternion"][pair.index_a].astype(np.float64)
        q_b = archive.records["quaternion"][pair.index_b].astype(np.float64)
        composed = hamilton_product(pair.g_rel.as_array(), q_a)
        assert abs(np.dot(composed, q_b)) == pytest.approx(1.0, abs=1e-5)


def test_epoch_pairs(archive):
    """Testa pares da época: um por objeto pedido, vistas distintas"""
    rng = np.random.default_rng(1)
    objects = np.repeat(archive.object_ids("train"), 3)
    idx_a, idx_b = sample_epoch_pairs(archive, rng, objects)
    assert len(idx_a) == len(objects)
    assert np.all(idx_a != idx_b)
    np.testing.assert_array_equal(idx_a // archive.n_views, objects)
    np.testing.assert_array_equal(idx_b // archive.n_views, objects)
    g = pair_relative_quaternions(archive, idx_a, idx_b)
    np.testing.assert_allclose(np.linalg.norm(g, axis=1), np.ones(len(objects)), atol=1e-6)


def test_invalid_parameters():
    """Testa ParameterError para classe, contagem e fatores inválidos"""
    with pytest.raises(ParameterError):
        object_geometry(len(TEMPLATES), 0)
    with pytest.raises(ParameterError):
        generate_dataset(num_classes=len(TEMPLATES) + 1, objects_per_class=1, n_views=1)
    with pytest.raises(ParameterError):
        generate_dataset(num_classes=1, objects_per_class=0, n_views=1)
    with pytest.raises(ParameterError):
        SceneParams(class_id=0, object_seed=0, angles=TaitBryanAngles(0, 0, 0), quaternion=None, floor_hue=1.5)


def test_scene_params_roundtrip(archive):
    """Testa leitura dos fatores latentes de um registro"""
    params = archive.scene_params(4)
    assert params.class_id == 0
    assert 0.0 <= params.floor_hue <= 1.0


def test_preview_png(archive, tmp_path):
    """Testa que a prévia PNG é gravada"""
    path = save_preview(archive, str(tmp_path / "preview.png"))
    assert os.path.getsize(path) > 0


def test_archive_body_is_pixel_interleaved(archive):
    """Testa o layout do arquivo: cada registro começa com H·W·3 floats LE, RGB por pixel"""
    payload = archive.to_bytes()
    (length,) = struct.unpack("<I", payload[4:8])
    size = archive.image_size
    body = np.frombuffer(payload[8 + length:], dtype="<f4", count=size * size * 3).reshape(size, size, 3)
    image = archive.images([0])[0]
    for r, c in ((0, 0), (3, 11), (size - 1, size - 1), (size // 2, size // 2)):
        np.testing.assert_array_equal(body[r, c], image[:, r, c])
    np.testing.assert_array_equal(body, archive.records["image"][0])


def test_training_pair_views_are_channel_first(archive):
    """Testa que as vistas do par saem no formato do encoder (3×H×W)"""
    pair = sample_training_pair(archive, np.random.default_rng(2))
    assert pair.view_a.shape == (3, archive.image_size, archive.image_size)
    np.testing.assert_array_equal(pair.view_a, archive.images([pair.index_a])[0])


def test_origin_projects_to_image_center():
    """Testa que a origem cai em ((size-1)/2, (size-1)/2)"""
    for size in (16, 17, 32):
        center = (size - 1) / 2.0
        np.testing.assert_allclose(project_points(np.zeros(3), size), [[center, center]])


def test_zero_rotation_renders_canonical_pose():
    """Testa que a vista sem rotação desenha os vértices canônicos projetados"""
    size = 32
    params = SceneParams(class_id=1, object_seed=11, angles=TaitBryanAngles(0.0, 0.0, 0.0),
                         quaternion=Quaternion.identity(), floor_hue=0.0, light_hue=0.5)
    image = render_view(1, 11, params, size)
    background = image[:, 0, 0]
    vertices, _ = object_geometry(1, 11)
    for col, row in project_points(vertices, size):
        pixel = image[:, int(round(row)), int(round(col))]
        assert np.abs(pixel - background).max() > 1e-3
    turned = SceneParams(class_id=1, object_seed=11, angles=TaitBryanAngles(0.4, 0.3, 0.2),
                         quaternion=None, floor_hue=0.0, light_hue=0.5)
    assert not np.array_equal(render_view(1, 11, turned, size), image)


def test_classes_separable_by_nearest_centroid():
    """Testa que as classes são distinguíveis: centróide mais próximo (pixels do objeto) bate o acaso"""
    data = generate_dataset(num_classes=2, objects_per_class=6, n_views=8, size=32, seed=5)
    images = data.images(np.arange(len(data)))
    foreground = np.abs(images - images[:, :, :1, :1]).max(axis=1) > 1e-3
    counts = foreground.reshape(len(data), -1).sum(axis=1).astype(np.float64)
    labels = data.records["class_id"].astype(np.int64)
    train = data.record_indices(data.object_ids("train"))
    val = data.record_indices(data.object_ids("val"))
    centroids = np.array([counts[train][labels[train] == k].mean() for k in range(2)])
    predicted = np.argmin(np.abs(counts[val][:, None] - centroids[None, :]), axis=1)
    assert np.mean(predicted == labels[val]) > 0.5
