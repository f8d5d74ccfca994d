# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
Central finite-difference checks of autograd gradients.

Meant for float64 models: perturbations are applied in place to parameter
entries and the scalar loss is re-evaluated without building a graph.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
import torch

logger = logging.getLogger(__name__)


def central_difference(
    fn: Callable[[], torch.Tensor],
    tensor: torch.Tensor,
    index: Tuple[int, ...],
    eps: float = 1e-6,
) -> float:
    """(fn(x + eps) - fn(x - eps)) / 2 eps for one entry of ``tensor``; the entry is restored."""
    with torch.no_grad():
        original = tensor[index].item()
        tensor[index] = original + eps
        plus = float(fn())
        tensor[index] = original - eps
        minus = float(fn())
        tensor[index] = original
    return (plus - minus) / (2 * eps)


@dataclass
class GradSample:
    name: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    ok: bool


@dataclass
class GradCheckReport:
    samples: List[GradSample]

    @property
    def ok(self) -> bool:
        return all(s.ok for s in self.samples)

    @property
    def failures(self) -> List[GradSample]:
        return [s for s in self.samples if not s.ok]


def gradients_match(analytic: float, numeric: float, rtol: float, atol: float) -> bool:
    return abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric))


def check_parameter_gradients(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[Tuple[str, torch.nn.Parameter]],
    n_samples: int = 20,
    seed: int = 0,
    rtol: float = 1e-3,
    atol: float = 1e-8,
    eps: float = 1e-6,
) -> GradCheckReport:
    """
    Compare autograd against central differences on sampled parameter entries.

    Entries are drawn round-robin over ``params`` so every named tensor is
    covered when ``n_samples >= len(params)``.
    """
    params = [(name, p) for name, p in params if p.requires_grad]
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    analytic = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for name, p in params}

    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_samples):
        name, param = params[i % len(params)]
        index = tuple(int(rng.integers(dim)) for dim in param.shape)
        a = float(analytic[name][index])
        n = central_difference(loss_fn, param, index, eps)
        samples.append(GradSample(name, index, a, n, gradients_match(a, n, rtol, atol)))

    report = GradCheckReport(samples)
    if not report.ok:
        for s in report.failures:
            logger.warning(f"Gradient mismatch at {s.name}{list(s.index)}: analytic={s.analytic:.6g} numeric={s.numeric:.6g}")
    return report
