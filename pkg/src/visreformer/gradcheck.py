"""Central finite-difference gradient checking.

The numerical side only ever calls the forward function on perturbed copies
of parameter arrays; it never touches the autodiff tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import backward, no_grad
from .core.rng import RngStream


@dataclass
class GradSample:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric))
        if denom == 0.0:
            return 0.0
        return abs(self.analytic - self.numeric) / denom


def central_difference(loss_fn, array: np.ndarray, index: tuple, h: float = 1e-5, points: int = 3,
                       piece_fn=None, shrink: int = 4) -> float:
    """Central difference for one entry of ``array`` (restored afterwards).

    ``points=3`` is ``(f(x+h) - f(x-h)) / 2h``; ``points=5`` is the
    fourth-order stencil ``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h``,
    which tolerates a larger ``h`` and so loses less to rounding.

    For piecewise-smooth losses ``piece_fn()`` returns an identifier of the
    smooth piece at the current parameters.  If any stencil point leaves the
    piece of the unperturbed point, ``h`` is divided by 10 (up to ``shrink``
    times) so that the stencil measures the derivative of that piece alone.
    """
    if points not in (3, 5):
        raise ValueError("points must be 3 or 5")
    orig = array[index]
    offsets = (1, -1) if points == 3 else (2, 1, -1, -2)

    def at(offset):
        array[index] = orig + offset
        with no_grad():
            value = float(loss_fn().data)
        return value, (piece_fn() if piece_fn is not None else None)

    try:
        base = None
        if piece_fn is not None:
            array[index] = orig
            base = piece_fn()
        for _ in range(shrink + 1):
            vals = {}
            same = True
            for o in offsets:
                vals[o], piece = at(o * h)
                same &= piece == base
            if same:
                break
            h /= 10.0
        else:
            raise ValueError(f"stencil at {index} crosses a piece boundary even at h={h * 10:g}")
        if points == 3:
            return (vals[1] - vals[-1]) / (2 * h)
        return (-vals[2] + 8 * vals[1] - 8 * vals[-1] + vals[-2]) / (12 * h)
    finally:
        array[index] = orig


def check_gradients(loss_fn, params: dict, rng: RngStream, per_param: int = 3, h: float = 1e-5,
                    points: int = 3, piece_fn=None) -> list:
    """Compare tape gradients with central differences on sampled entries.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values each call.  Returns one :class:`GradSample` per sampled entry.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    grads = backward(loss)
    samples = []
    for name, p in params.items():
        g = grads.get(p)
        g = np.zeros_like(p.data) if g is None else g
        flat = rng.generator.choice(p.size, size=min(per_param, p.size), replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), p.shape)
            samples.append(GradSample(name, tuple(int(i) for i in idx), float(g[idx]),
                                      central_difference(loss_fn, p.data, idx, h, points, piece_fn)))
    return samples
