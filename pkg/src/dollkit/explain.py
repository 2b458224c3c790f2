"""Riemann-sum path attributions from a black baseline.

For an input X the attribution of the per-class loss L is::

    E = (1/T) * sum_{t=1..T} grad L evaluated at (t/T) * X

The gradient is taken with respect to the (scaled) input itself, without the
``(X - baseline)`` factor of textbook Integrated Gradients, so completeness does
not hold and is not claimed.  Multi-channel attributions are reduced to one
plane by summing absolute values over channels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import torch

from .errors import NumericError
from .models import Classifier, loss_gradients


@dataclass
class AttributionMap:
    values: np.ndarray            # H x W, abs-reduced over channels
    class_index: int
    steps: int
    model_id: Optional[str] = None
    raw: Optional[np.ndarray] = field(default=None, repr=False)  # signed, ch x H x W


Scorer = Callable[[torch.Tensor], torch.Tensor]


def _gradient_fn(model: Union[Classifier, Scorer], class_index: int):
    if isinstance(model, Classifier):
        return lambda x: loss_gradients(model, x, class_index)

    def grad(x):
        x = x.detach().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(model(x).sum(), x)
        return g
    return grad


def path_gradients(grad_fn, x: torch.Tensor, steps: int, chunk: int = 256) -> torch.Tensor:
    """Mean of ``grad_fn`` over the points t/T * x, t = 1..T, for a batch x (B x ch x H x W)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    alphas = torch.arange(1, steps + 1, dtype=x.dtype) / steps
    # every (step, sample) pair is independent; batch them step-major
    per_step = max(1, chunk // max(1, len(x)))
    acc = torch.zeros_like(x)
    for s0 in range(0, steps, per_step):
        a = alphas[s0:s0 + per_step]
        scaled = (a.view(-1, 1, 1, 1, 1) * x.unsqueeze(0)).reshape(-1, *x.shape[1:])
        g = grad_fn(scaled).reshape(len(a), *x.shape)
        bad = ~torch.isfinite(g).reshape(len(a), -1).all(dim=1)
        if bad.any():
            step = s0 + int(torch.nonzero(bad)[0]) + 1
            raise NumericError(f"non-finite gradient at path step {step} of {steps}")
        acc += g.sum(dim=0)
    return acc / steps


def integrated_gradients(model, image, class_index: int, T: int = 5,
                         model_id: Optional[str] = None) -> AttributionMap:
    """Attribution of class ``class_index`` for one image (H x W or ch x H x W).

    ``model`` is a :class:`Classifier` (loss = -log p_c) or any callable mapping a
    batch to per-sample scalar losses.
    """
    image = np.asarray(image)
    dtype = next(model.parameters()).dtype if isinstance(model, torch.nn.Module) else torch.float64
    x = torch.as_tensor(image, dtype=dtype)
    x = x.reshape(1, 1, *x.shape) if x.ndim == 2 else x.unsqueeze(0)
    raw = path_gradients(_gradient_fn(model, class_index), x, T)[0].numpy()
    return AttributionMap(values=np.abs(raw).sum(axis=0), class_index=class_index, steps=T,
                          model_id=model_id, raw=raw)


def attribution_batch(classifier: Classifier, images: np.ndarray, class_index: int, T: int = 5) -> np.ndarray:
    """Abs-reduced maps (B x H x W) for a batch of images (B x ch x H x W)."""
    x = torch.as_tensor(images, dtype=next(classifier.parameters()).dtype)
    raw = path_gradients(_gradient_fn(classifier, class_index), x, T)
    return raw.abs().sum(dim=1).numpy()


def riemann_error(model, image, class_index: int, T: int, T_ref: int) -> float:
    """Max-norm distance between the T-step and T_ref-step attribution maps."""
    if T_ref <= T:
        raise ValueError("T_ref must exceed T")
    a = integrated_gradients(model, image, class_index, T).values
    b = integrated_gradients(model, image, class_index, T_ref).values
    return float(np.max(np.abs(a - b)))
