"""
Проверка аналитических градиентов центральными конечными разностями.
"""

from typing import Callable, Dict, List, Mapping, Tuple

import numpy as np

Params = Dict[str, np.ndarray]


def numerical_gradient(loss_fn: Callable[[], float], param: np.ndarray,
                       index: Tuple[int, ...], h: float = 1e-5) -> float:
    """(f(p + h) - f(p - h)) / 2h по одному элементу; параметр восстанавливается."""
    original = param[index]
    try:
        param[index] = original + h
        plus = loss_fn()
        param[index] = original - h
        minus = loss_fn()
    finally:
        param[index] = original
    return (plus - minus) / (2.0 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """Относительная ошибка; ниже floor по модулю сравнение становится абсолютным."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def largest_entries(grad: np.ndarray, count: int) -> List[Tuple[int, ...]]:
    """Индексы count элементов с наибольшим по модулю градиентом."""
    flat = np.argsort(-np.abs(grad).ravel(), kind="stable")[:count]
    return [tuple(int(i) for i in np.unravel_index(j, grad.shape)) for j in flat]


def sampled_entries(grad: np.ndarray, count: int, rng: np.random.Generator) -> List[Tuple[int, ...]]:
    """Крупнейшие по модулю элементы и случайные элементы всего тензора, без повторов."""
    picked = largest_entries(grad, count // 2)
    size = grad.size
    extra = rng.choice(size, size=min(size, count - len(picked)), replace=False)
    for j in extra:
        index = tuple(int(i) for i in np.unravel_index(int(j), grad.shape))
        if index not in picked:
            picked.append(index)
    return picked


def check_gradients(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    count: int = 16,
    h: float = 1e-5,
    seed: int = 0,
) -> Dict[str, float]:
    """
    Максимальная относительная ошибка по каждому параметру из grads.

    Проверяются все параметры, включая те, у которых аналитический
    градиент нулевой: половина элементов - с наибольшим градиентом,
    остальные выбираются случайно по всему тензору.

    Args:
        loss_fn: Функция без аргументов, считающая лосс по текущим params
        params: Параметры (изменяются на месте и восстанавливаются)
        grads: Аналитические градиенты тех же форм
        count: Сколько элементов проверять на параметр
        h: Шаг разности
        seed: Seed выбора случайных элементов

    Returns:
        Имя параметра -> максимальная относительная ошибка
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for name in sorted(grads):
        grad = grads[name]
        errors = [
            relative_error(grad[index], numerical_gradient(loss_fn, params[name], index, h))
            for index in sampled_entries(grad, count, rng)
        ]
        worst[name] = max(errors)
    return worst
