"""Álgebra de tensores densos com diferenciação automática em modo reverso.

Cada operação é uma subclasse de `Function` com `forward` (arrays numpy) e
`backward` (gradiente da saída -> gradientes das entradas). O `Tensor`
guarda o array, a função que o criou e o acumulador de gradiente.

Precisão padrão: float32. Reduções acumulam em float64. O contexto
`precision(np.float64)` existe para checagens de gradiente por diferenças
finitas.
"""
import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.errors import (
    ContractError,
    DegenerateBatchError,
    DimensionError,
    NumericError,
    ParameterError,
    shape_mismatch,
)

LOG_EPS = 1e-8

_DTYPE = np.float32
_GRAD_ENABLED = True


@contextlib.contextmanager
def precision(dtype):
    """Troca o dtype padrão dos tensores criados dentro do bloco."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def no_grad():
    """Desliga a gravação do grafo (avaliação, probes, métricas)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def default_dtype():
    return _DTYPE


def _check_finite(array, where):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{where}: valores não finitos (NaN/Inf) detectados")


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Nó do grafo de computação: guarda as entradas e o que o backward precisa."""

    def __init__(self, *inputs):
        self.inputs = inputs

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        inputs = tuple(as_tensor(t) for t in inputs)
        func = cls(*inputs)
        out = func.forward(*(t.data for t in inputs), **kwargs)
        out = np.asarray(out, dtype=inputs[0].data.dtype)
        _check_finite(out, cls.__name__)
        requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _creator=func if requires_grad else None)


class Tensor:
    """Array denso imutável com metadados de gradiente.

    Args:
        data: Valores (qualquer coisa aceita por np.asarray).
        requires_grad (bool): Se o tensor é folha treinável.
        name (str, optional): Nome usado em mensagens e checkpoints.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _creator=None):
        array = np.asarray(data)
        if array.dtype != _DTYPE and _creator is None:
            array = array.astype(_DTYPE)
        if _creator is None:
            _check_finite(array, name or "Tensor")
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._creator = _creator

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # aritmética
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # reduções e formas
    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self):
        return self.transpose()

    # elementwise
    def relu(self):
        return Relu.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def log(self):
        return Log.apply(self)

    def exp(self):
        return Exp.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def clamp_min(self, floor):
        return ClampMin.apply(self, floor=float(floor))

    def softmax(self, axis=-1):
        return Softmax.apply(self, axis=axis)

    def backward(self):
        """Propaga o gradiente desta loss escalar até as folhas.

        Cada nó é visitado uma única vez, em ordem topológica reversa.

        Raises:
            ContractError: Se o tensor não for escalar.
        """
        if self.size != 1:
            raise ContractError(f"backward exige loss escalar, recebeu shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._creator is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            input_grads = node._creator.backward(grad)
            for parent, parent_grad in zip(node._creator.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=parent.data.dtype)
                if parent_grad.shape != parent.shape:
                    parent_grad = _unbroadcast(parent_grad, parent.shape).reshape(parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad


def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._creator is not None:
            for parent in reversed(node._creator.inputs):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


# ============================================================
#  Operações elementares
# ============================================================
class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1),)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise NumericError("log: entrada não positiva (aplique clamp_min antes)")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Sqrt(Function):
    def forward(self, a):
        if np.any(a < 0):
            raise NumericError("sqrt: entrada negativa")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / np.maximum(self.out, np.finfo(self.out.dtype).tiny),)


class ClampMin(Function):
    def forward(self, a, floor):
        self.mask = a > floor
        return np.where(self.mask, a, floor)

    def backward(self, grad):
        return (grad * self.mask,)


class Softmax(Function):
    def forward(self, a, axis):
        if a.shape[axis] == 0:
            raise ParameterError("softmax: eixo vazio")
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


# ============================================================
#  Formas e reduções
# ============================================================
class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, tuple(np.atleast_1d(self.axis)))
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        return a[index]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


# ============================================================
#  Álgebra linear
# ============================================================
class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


def matmul(a, b):
    """Produto matricial (com suporte a dimensões de batch à esquerda).

    Raises:
        DimensionError: Se as dimensões internas não batem.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise shape_mismatch("matmul", a.shape, b.shape)
    return MatMul.apply(a, b)


class Einsum(Function):
    """Contração de dois operandos via np.einsum.

    O backward reutiliza einsum; por isso todo índice de um operando precisa
    aparecer na saída ou no outro operando.
    """

    def forward(self, a, b, subscripts):
        inputs, self.out_sub = subscripts.replace(" ", "").split("->")
        self.a_sub, self.b_sub = inputs.split(",")
        for own, other in ((self.a_sub, self.b_sub), (self.b_sub, self.a_sub)):
            if len(set(own)) != len(own) or not set(own) <= set(other) | set(self.out_sub):
                raise ContractError(f"einsum: subscritos não suportados '{subscripts}'")
        self.a, self.b = a, b
        return np.einsum(subscripts, a, b, optimize=True)

    def backward(self, grad):
        grad_a = np.einsum(f"{self.out_sub},{self.b_sub}->{self.a_sub}", grad, self.b, optimize=True)
        grad_b = np.einsum(f"{self.out_sub},{self.a_sub}->{self.b_sub}", grad, self.a, optimize=True)
        return grad_a, grad_b


def einsum(subscripts, a, b):
    try:
        return Einsum.apply(a, b, subscripts=subscripts)
    except ValueError as exc:
        if isinstance(exc, ContractError):
            raise
        raise DimensionError(f"einsum '{subscripts}': {exc}") from exc


class Conv2d(Function):
    def forward(self, x, w, stride, padding):
        self.x_shape, self.stride, self.padding = x.shape, stride, padding
        k = w.shape[-1]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        self.windows, self.w, self.padded_shape = windows, w, xp.shape
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        s, k = self.stride, self.w.shape[-1]
        h_out, w_out = grad.shape[2], grad.shape[3]
        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_xp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                contribution = np.einsum("bohw,oc->bchw", grad, self.w[:, :, i, j])
                grad_xp[:, :, i:i + s * h_out:s, j:j + s * w_out:s] += contribution
        p = self.padding
        grad_x = grad_xp[:, :, p:self.padded_shape[2] - p, p:self.padded_shape[3] - p]
        return grad_x, grad_w


def conv2d(x, kernels, stride=1, padding=0):
    """Correlação cruzada 2D.

    Args:
        x (Tensor): Entrada C_in×H×W ou B×C_in×H×W.
        kernels (Tensor): Pesos C_out×C_in×k×k.
        stride (int): Passo (>= 1).
        padding (int): Zero-padding simétrico.

    Returns:
        Tensor: C_out×H'×W' (ou com batch), H' = floor((H+2p-k)/stride)+1.

    Raises:
        ParameterError: stride < 1 ou padding < 0.
        DimensionError: Kernel maior que a entrada com padding ou canais incompatíveis.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: stride={stride} e padding={padding} inválidos")
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise shape_mismatch("conv2d", x.shape, kernels.shape)
    k = kernels.shape[-1]
    if k > x.shape[2] + 2 * padding or k > x.shape[3] + 2 * padding:
        raise shape_mismatch("conv2d", x.shape, kernels.shape)
    out = Conv2d.apply(x, kernels, stride=int(stride), padding=int(padding))
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out


# ============================================================
#  API funcional
# ============================================================
def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ParameterError(f"softmax: eixo {axis} inválido para shape {x.shape}")
    return Softmax.apply(x, axis=axis)


_ELEMENTWISE = {
    "relu": Relu,
    "sigmoid": Sigmoid,
    "log": Log,
    "exp": Exp,
}


def elementwise(x, fn):
    """Aplica relu, sigmoid, log ou exp elemento a elemento."""
    if fn not in _ELEMENTWISE:
        raise ParameterError(f"função elementwise desconhecida: {fn}")
    x = as_tensor(x)
    _check_finite(x.data, fn)
    return _ELEMENTWISE[fn].apply(x)


def safe_log(x, eps=LOG_EPS):
    return as_tensor(x).clamp_min(eps).log()


def _require_batch(z, op):
    z = as_tensor(z)
    if z.ndim != 2:
        raise DimensionError(f"{op}: esperada matriz B×d, recebeu shape {z.shape}")
    if z.shape[0] < 2:
        raise DegenerateBatchError(f"{op}: batch com B={z.shape[0]} (< 2)")
    return z


def batch_stats(z):
    """Média e variância não viesada (divisor B-1) por coluna.

    Returns:
        tuple[Tensor, Tensor]: (média d, variância d).

    Raises:
        DegenerateBatchError: Se B < 2.
    """
    z = _require_batch(z, "batch_stats")
    b = z.shape[0]
    mean = z.mean(axis=0)
    centered = z - mean
    variance = (centered * centered).sum(axis=0) * (1.0 / (b - 1))
    return mean, variance


def covariance_matrix(z):
    """Covariância amostral d×d das colunas centradas (divisor B-1)."""
    z = _require_batch(z, "covariance_matrix")
    b = z.shape[0]
    centered = z - z.mean(axis=0)
    return matmul(centered.T, centered) * (1.0 / (b - 1))


def backward(loss, params=None):
    """Executa o backward e devolve o mapa de gradientes.

    Args:
        loss (Tensor): Loss escalar.
        params (dict[str, Tensor], optional): Parâmetros de interesse.

    Returns:
        dict[str, np.ndarray]: Gradiente por nome; zero para quem não participa
        do grafo da loss.
    """
    loss.backward()
    if params is None:
        return {}
    return {
        name: p.grad if p.grad is not None else np.zeros_like(p.data)
        for name, p in params.items()
    }


def numerical_gradient(fn, tensor, h=1e-3):
    """Gradiente por diferenças centrais de uma função escalar `fn()`.

    `tensor.data` é perturbado no lugar e restaurado ao final.
    """
    grad = np.zeros(tensor.shape, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))
