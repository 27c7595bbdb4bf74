"""Adam com correção de viés (padrões: lr=1e-3, beta1=0.9, beta2=0.999)."""
from dataclasses import dataclass, field

import numpy as np

from app.errors import ParameterError, shape_mismatch


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparameters(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def adam_step(params, grads, state):
    """Um passo de Adam sobre dicionários nome -> array.

    Args:
        params (dict[str, np.ndarray]): Parâmetros atuais.
        grads (dict[str, np.ndarray]): Gradientes (ausente = zero).
        state (AdamState): Momentos e contador; atualizado no lugar.

    Returns:
        tuple[dict[str, np.ndarray], AdamState]: Novos parâmetros e o estado.

    Raises:
        ParameterError: lr <= 0.
        DimensionError: Gradiente ou momento com shape diferente do parâmetro.
    """
    if not state.lr > 0:
        raise ParameterError(f"Adam: lr deve ser > 0, recebeu {state.lr}")
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    updated = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        if grad.shape != value.shape:
            raise shape_mismatch(f"Adam[{name}]", value.shape, grad.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        elif m.shape != value.shape:
            raise shape_mismatch(f"Adam[{name}] momento", value.shape, m.shape)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        updated[name] = (value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype)
        state.m[name] = m.astype(value.dtype)
        state.v[name] = v.astype(value.dtype)
    return updated, state


class Adam:
    """Otimizador ligado aos tensores de um Module."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
        if not lr > 0:
            raise ParameterError(f"Adam: lr deve ser > 0, recebeu {lr}")
        self.params = params
        self.state = state or AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        arrays = {name: p.data for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        updated, self.state = adam_step(arrays, grads, self.state)
        for name, p in self.params.items():
            p.data = updated[name]
