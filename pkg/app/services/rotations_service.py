import math
from dataclasses import dataclass

import numpy as np

from app.errors import ContractError, ParameterError

HALF_PI = math.pi / 2
UNIT_TOL = 1e-4

# ============================================================
#  Tipos
# ============================================================
@dataclass(frozen=True)
class TaitBryanAngles:
    """Ângulos de Tait-Bryan extrínsecos (X, depois Y, depois Z), em radianos.

    Cada ângulo fica em [-pi/2, pi/2], o intervalo de rotação do objeto no
    dataset.
    """

    rx: float
    ry: float
    rz: float

    def __post_init__(self):
        for axis, value in (("rx", self.rx), ("ry", self.ry), ("rz", self.rz)):
            if not -HALF_PI - 1e-6 <= value <= HALF_PI + 1e-6:
                raise ParameterError(f"Ângulo {axis}={value} fora de [-pi/2, pi/2]")

    def as_array(self):
        return np.array([self.rx, self.ry, self.rz], dtype=np.float64)


@dataclass(frozen=True)
class Quaternion:
    """Quaternion (w, x, y, z). q e -q representam a mesma rotação."""

    w: float
    x: float
    y: float
    z: float

    @classmethod
    def from_array(cls, values):
        w, x, y, z = (float(v) for v in values)
        return cls(w, x, y, z)

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    def as_array(self):
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self):
        return float(np.linalg.norm(self.as_array()))

    def normalized(self):
        n = self.norm()
        if n == 0:
            raise ContractError("Quaternion nulo não pode ser normalizado")
        return Quaternion.from_array(self.as_array() / n)

    def canonical(self):
        """Mesma rotação com w >= 0 (serialização determinística)."""
        return Quaternion.from_array(canonicalize(self.as_array()))

    def conjugate(self):
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def inverse(self):
        n2 = self.norm() ** 2
        return Quaternion(self.w / n2, -self.x / n2, -self.y / n2, -self.z / n2)

    def dot(self, other):
        return float(np.dot(self.as_array(), other.as_array()))

    def __mul__(self, other):
        return Quaternion.from_array(hamilton_product(self.as_array(), other.as_array()))

    def is_unit(self, tol=UNIT_TOL):
        return abs(self.norm() - 1.0) <= tol


def require_unit(*quaternions):
    for q in quaternions:
        if not q.is_unit():
            raise ContractError(f"Quaternion não unitário (norma={q.norm():.6f})")


# ============================================================
#  Operações vetorizadas (arrays N×4 em ordem w, x, y, z)
# ============================================================
def hamilton_product(a, b):
    """Produto de Hamilton a ⊗ b, aceita arrays (..., 4)."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def canonicalize(q):
    """Troca o sinal das linhas com w < 0."""
    q = np.asarray(q, np.float64)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def quaternions_from_angles(angles):
    """Ângulos extrínsecos X-Y-Z (N×3) -> quaternions unitários canônicos (N×4).

    A rotação extrínseca X, depois Y, depois Z equivale a R = Rz·Ry·Rx, ou
    seja q = qz ⊗ qy ⊗ qx.
    """
    angles = np.atleast_2d(np.asarray(angles, np.float64))
    half = angles / 2.0
    c, s = np.cos(half), np.sin(half)
    zeros = np.zeros(len(angles))
    qx = np.stack([c[:, 0], s[:, 0], zeros, zeros], axis=-1)
    qy = np.stack([c[:, 1], zeros, s[:, 1], zeros], axis=-1)
    qz = np.stack([c[:, 2], zeros, zeros, s[:, 2]], axis=-1)
    q = hamilton_product(qz, hamilton_product(qy, qx))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return canonicalize(q)


def relative_quaternions(q_a, q_b):
    """q_rel = q_b ⊗ q_a⁻¹ para arrays de quaternions unitários (N×4)."""
    q_a, q_b = np.atleast_2d(q_a), np.atleast_2d(q_b)
    conj = q_a * np.array([1.0, -1.0, -1.0, -1.0])
    rel = hamilton_product(q_b, conj)
    rel /= np.linalg.norm(rel, axis=-1, keepdims=True)
    return canonicalize(rel)


def rotation_distances(q1, q2):
    """1 - <q1, q2>² linha a linha; invariante a sinal (dupla cobertura)."""
    dots = np.sum(np.asarray(q1, np.float64) * np.asarray(q2, np.float64), axis=-1)
    return np.clip(1.0 - dots ** 2, 0.0, 1.0)


# ============================================================
#  Matrizes de rotação (renderização e oráculo)
# ============================================================
def angles_to_matrix(angles):
    """Matriz 3×3 da rotação extrínseca X-Y-Z: R = Rz·Ry·Rx."""
    rx, ry, rz = np.asarray(angles, np.float64)
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def matrix_to_quaternion(matrix):
    """Matriz de rotação -> quaternion canônico (método de Shepperd)."""
    m = np.asarray(matrix, np.float64)
    trace = np.trace(m)
    if trace > 0:
        s = math.sqrt(trace + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return canonicalize(q / np.linalg.norm(q))


def quaternion_to_matrix(q):
    w, x, y, z = np.asarray(q, np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ============================================================
#  API escalar
# ============================================================
def tait_bryan_to_quaternion(angles):
    """Converte TaitBryanAngles no quaternion unitário canônico (w >= 0).

    Raises:
        ParameterError: Ângulo fora do intervalo (validado na construção).
    """
    if not isinstance(angles, TaitBryanAngles):
        angles = TaitBryanAngles(*(float(a) for a in angles))
    return Quaternion.from_array(quaternions_from_angles(angles.as_array())[0])


def relative_rotation(q_a, q_b):
    """Rotação que leva a vista A até a vista B: q_b ⊗ q_a⁻¹, normalizada.

    Raises:
        ContractError: Se algum quaternion não for unitário.
    """
    require_unit(q_a, q_b)
    return Quaternion.from_array(relative_quaternions(q_a.as_array(), q_b.as_array())[0])


def rotation_distance(q1, q2):
    """Distância 1 - <q1, q2>², em [0, 1].

    Raises:
        ContractError: Se algum quaternion não for unitário.
    """
    require_unit(q1, q2)
    return float(rotation_distances(q1.as_array(), q2.as_array()))


def sample_angles(rng, n):
    return rng.uniform(-HALF_PI, HALF_PI, size=(n, 3))


def sample_rotation(rng):
    """Sorteia ângulos uniformes em [-pi/2, pi/2] e o quaternion correspondente.

    Args:
        rng (np.random.Generator): Gerador com semente.

    Returns:
        tuple[TaitBryanAngles, Quaternion]
    """
    rx, ry, rz = sample_angles(rng, 1)[0]
    angles = TaitBryanAngles(float(rx), float(ry), float(rz))
    return angles, tait_bryan_to_quaternion(angles)
