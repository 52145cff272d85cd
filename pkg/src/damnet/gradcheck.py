"""Central finite-difference verification of analytic gradients.

All checks run in float64; the relative error uses the denominator
max(|analytic|, |numeric|, 1e-8).
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, NumericError
from .layers import (
    AvgPool2d,
    BatchNorm,
    Conv2d,
    GlobalAvgPool,
    Linear,
    ReLU,
    softmax_cross_entropy,
)

REL_ERR_FLOOR = 1e-8
DEFAULT_EPS = 1e-5
GRADCHECK_TOLERANCE = 1e-4


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_ERR_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def finite_diff_check(objective, tensors: dict, analytic: dict, eps: float = DEFAULT_EPS) -> float:
    """Compare analytic gradients against central differences.

    ``objective`` is a zero-argument callable returning a scalar; it is
    re-evaluated after each in-place perturbation of the arrays in
    ``tensors``. Returns the worst relative error over all elements.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"finite-difference eps must be in [1e-7, 1e-4], got {eps}")
    worst = 0.0
    for name, tensor in tensors.items():
        if tensor.dtype != np.float64:
            raise ConfigError(f"finite differences need float64 arrays, '{name}' is {tensor.dtype}")
        grad = np.array(analytic[name], dtype=np.float64)
        numeric = np.empty(tensor.size)
        for i in range(tensor.size):
            original = tensor.flat[i]
            tensor.flat[i] = original + eps
            upper = objective()
            tensor.flat[i] = original - eps
            lower = objective()
            tensor.flat[i] = original
            if not (np.isfinite(upper) and np.isfinite(lower)):
                raise NumericError(f"non-finite objective while perturbing '{name}'")
            numeric[i] = (upper - lower) / (2.0 * eps)
        worst = max(worst, max_relative_error(grad.ravel(), numeric))
    return worst


def check_layer(layer, x: np.ndarray, *, train: bool = False, eps: float = DEFAULT_EPS, rng=None) -> float:
    """Finite-difference check of one layer's input and parameter gradients.

    The scalar objective is sum(forward(x) * R) for a fixed random
    projection R, so its gradient w.r.t. the output is exactly R.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = layer.forward(x, train)
    projection = rng.standard_normal(out.shape)

    def objective():
        return float((layer.forward(x, train) * projection).sum())

    layer.forward(x, train)
    dx = layer.backward(projection)
    tensors = {"x": x}
    analytic = {"x": dx}
    for key, value in layer.params().items():
        tensors[f"param:{key}"] = value
        analytic[f"param:{key}"] = np.array(layer.grads()[key])
    return finite_diff_check(objective, tensors, analytic, eps=eps)


def gradcheck_report(seed: int = 0, instances: int = 10, eps: float = DEFAULT_EPS) -> dict[str, float]:
    """Max relative finite-difference error per layer primitive.

    Each primitive is checked on ``instances`` randomized small inputs;
    the reported value is the worst error seen.
    """
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def record(name, err):
        results[name] = max(results.get(name, 0.0), err)

    for i in range(instances):
        x = rng.standard_normal((2, 3, 5, 6))
        conv = Conv2d(3, 4, 3, stride=1 + (i % 3 == 2), pad=i % 2, rng=rng, dtype=np.float64)
        record("conv2d_3x3", check_layer(conv, x, eps=eps, rng=rng))

        x = rng.standard_normal((2, 5, 4, 6))
        conv = Conv2d(5, 3, 1, stride=1, pad=0, rng=rng, dtype=np.float64)
        record("conv2d_1x1", check_layer(conv, x, eps=eps, rng=rng))

        x = rng.standard_normal((8, 3, 2, 2))
        bn = BatchNorm(3, dtype=np.float64)
        bn.gamma[...] = rng.standard_normal(3) * 0.5 + 1.0
        bn.beta[...] = rng.standard_normal(3) * 0.1
        record("batchnorm", check_layer(bn, x, train=True, eps=eps, rng=rng))

        # keep samples away from the kink at 0 so central differences are valid
        x = rng.uniform(0.2, 1.5, size=(3, 4, 5, 6)) * rng.choice([-1.0, 1.0], size=(3, 4, 5, 6))
        record("relu", check_layer(ReLU(), x, eps=eps, rng=rng))

        x = rng.standard_normal((2, 3, 5, 7))
        record("avgpool2d", check_layer(AvgPool2d(), x, eps=eps, rng=rng))

        x = rng.standard_normal((2, 4, 2, 9))
        record("global_avgpool", check_layer(GlobalAvgPool(), x, eps=eps, rng=rng))

        x = rng.standard_normal((4, 7))
        record("linear", check_layer(Linear(7, 5, rng=rng, dtype=np.float64), x, eps=eps, rng=rng))

        logits = rng.standard_normal((5, 4))
        labels = rng.integers(0, 4, size=5)

        def objective():
            return softmax_cross_entropy(logits, labels)[0]

        _, grad = softmax_cross_entropy(logits, labels)
        record(
            "softmax_cross_entropy",
            finite_diff_check(objective, {"logits": logits}, {"logits": grad.copy()}, eps=eps),
        )
    return results
