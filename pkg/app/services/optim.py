"""
Детерминированные оптимизаторы над словарями именованных параметров.
Общие для проекции и дообучения бандла.
"""

from typing import Dict, Mapping, Optional

import numpy as np

from app.errors import ConfigError

Params = Dict[str, np.ndarray]


class Optimizer:
    """Базовый шаг: параметры обновляются на месте, маска обнуляет градиенты."""

    def __init__(self, learning_rate: float, masks: Optional[Mapping[str, np.ndarray]] = None):
        if learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        self.learning_rate = learning_rate
        self.masks = dict(masks or {})

    def _masked(self, name: str, grad: np.ndarray) -> np.ndarray:
        mask = self.masks.get(name)
        if mask is None:
            return grad
        return np.where(mask, grad, 0.0)

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> None:
        # Фиксированный порядок имён, чтобы шаг был воспроизводим
        for name in sorted(grads):
            self._update(name, params[name], self._masked(name, grads[name]))

    def _update(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        param -= self.learning_rate * grad


class Adam(Optimizer):
    def __init__(self, learning_rate: float, masks: Optional[Mapping[str, np.ndarray]] = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(learning_rate, masks)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: Params = {}
        self._v: Params = {}
        self._t: Dict[str, int] = {}

    def _update(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        m = self._m.setdefault(name, np.zeros_like(param))
        v = self._v.setdefault(name, np.zeros_like(param))
        t = self._t.get(name, 0) + 1
        self._t[name] = t

        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        update = self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

        mask = self.masks.get(name)
        if mask is not None:
            update = np.where(mask, update, 0.0)
        param -= update


def make_optimizer(kind: str, learning_rate: float,
                   masks: Optional[Mapping[str, np.ndarray]] = None) -> Optimizer:
    if kind == "sgd":
        return SGD(learning_rate, masks)
    if kind == "adam":
        return Adam(learning_rate, masks)
    raise ConfigError(f"Unknown optimizer: {kind}")
