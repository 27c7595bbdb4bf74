"""Camadas básicas sobre o ndcore: Module, Linear, Conv2d e MLP."""
import numpy as np

from app.errors import ConfigurationError, DimensionError
from models import ndcore
from models.ndcore import parameter


class Module:
    """Container de parâmetros e submódulos, na ordem de atribuição."""

    def named_parameters(self, prefix=""):
        params = {}
        for attr, value in vars(self).items():
            if isinstance(value, ndcore.Tensor) and value.requires_grad:
                params[f"{prefix}{attr}"] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(prefix=f"{prefix}{attr}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(prefix=f"{prefix}{attr}.{i}."))
        return params

    def parameter_count(self):
        return int(sum(p.size for p in self.named_parameters().values()))

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigurationError(f"parâmetros ausentes no estado: {sorted(missing)}")
        for name, p in params.items():
            array = np.asarray(state[name])
            if array.shape != p.shape:
                raise DimensionError(f"{name}: shape {array.shape} != {p.shape}")
            p.data = array.astype(p.data.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng):
        self.weight = parameter(he_normal(rng, (in_dim, out_dim), in_dim))
        self.bias = parameter(np.zeros(out_dim))

    def forward(self, x):
        return ndcore.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0):
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = parameter(he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = parameter(np.zeros((1, out_channels, 1, 1)))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ndcore.conv2d(x, self.weight, stride=self.stride, padding=self.padding) + self.bias


class MLP(Module):
    """MLP com ReLU entre as camadas (nenhuma ativação na saída).

    Args:
        dims (list[int]): [in_dim, hidden..., out_dim].
        rng (np.random.Generator): Gerador para a inicialização.
    """

    def __init__(self, dims, rng):
        if len(dims) < 2:
            raise ConfigurationError(f"MLP precisa de ao menos 2 dimensões, recebeu {dims}")
        self.dims = list(dims)
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x
