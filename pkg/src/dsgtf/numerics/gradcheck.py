"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, backward


@dataclass
class GradCheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(1.0, abs(self.analytic), abs(self.numeric))


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    def per_tensor(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.name] = max(out.get(e.name, 0.0), e.rel_error)
        return out


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tolerance: float = 1e-3,
    max_per_tensor: int | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare ``backward`` gradients against central differences.

    ``loss_fn`` recomputes the scalar loss from the current parameter values.
    When ``max_per_tensor`` is set, that many coordinates are sampled from
    each tensor (without replacement); otherwise every coordinate is probed.
    """
    report = GradCheckReport(tolerance)
    if not params:
        return report
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]

    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss, params)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    for p, g, name in zip(params, analytic, names):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            coords = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
        for c in coords:
            idx = tuple(int(i) for i in np.unravel_index(c, p.shape))
            orig = flat[c]
            try:
                flat[c] = orig + eps
                up = loss_fn().item()
                flat[c] = orig - eps
                down = loss_fn().item()
            except NonFiniteError as err:
                raise NonFiniteError(f"non-finite loss while probing {name}{list(idx)}: {err}") from err
            finally:
                flat[c] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"non-finite loss while probing {name}{list(idx)}")
            numeric = (up - down) / (2.0 * eps)
            report.entries.append(GradCheckEntry(name, idx, float(g[idx]), numeric))
    return report
