"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from corrpm.tensor import ActivationPattern, ParamStore, Tensor, backward


class NondeterminismError(RuntimeError):
    pass


@dataclass
class GradcheckReport:
    """Per-parameter max relative error between tape and finite differences.

    The relative error of a parameter is ``max|analytic - numeric|`` divided by
    the largest gradient magnitude seen for that parameter, so near-zero
    entries are judged against the parameter's own gradient scale. When that
    scale is below ``floor`` the difference is divided by ``floor`` instead;
    this keeps parameters the output is invariant to (true gradient zero,
    finite differences pure rounding noise) from reading as a 100% error.

    ``skipped_entries`` counts probes whose two stencil points fell in
    different linear pieces of a ReLU; those entries are excluded.
    """

    errors: dict[str, float]
    tolerance: float
    epsilon: float
    checked_entries: dict[str, int] = field(default_factory=dict)
    floor: float = 1e-6
    skipped_entries: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def skipped_fraction(self) -> float:
        total = sum(self.checked_entries.values()) + sum(self.skipped_entries.values())
        return sum(self.skipped_entries.values()) / total if total else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def worst(self) -> tuple[str, float] | None:
        if not self.errors:
            return None
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        if value.size != 1:
            raise ValueError(f"gradcheck: function must return a scalar, got shape {value.shape}")
        return value.item()
    return float(value)


def gradcheck(
    f: Callable[[], Tensor],
    params: ParamStore,
    epsilon: float = 1e-4,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    names: list[str] | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    skip_kinks: bool = True,
) -> GradcheckReport:
    """Compare ``backward`` gradients of ``f()`` against ``(f(θ+ε) - f(θ-ε)) / 2ε``.

    ``f`` takes no arguments and must read its parameters from ``params`` on
    every call. With ``max_entries`` set, that many entries per parameter are
    probed (chosen with ``seed``); otherwise every entry is. With
    ``skip_kinks`` a probe is dropped when ``θ+ε`` and ``θ-ε`` switch some
    ReLU on or off relative to each other, since the difference quotient then
    straddles a point where the gradient is undefined.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    names = params.names() if names is None else list(names)
    rng = np.random.default_rng(seed)

    params.zero_grad()
    loss = f()
    base = _scalar(loss)
    if _scalar(f()) != base:
        raise NondeterminismError("gradcheck: repeated evaluation of f gave different values")
    if isinstance(loss, Tensor) and loss.requires_grad:
        backward(loss, params)
    analytic = {n: params.grad(n).copy() for n in names}
    params.zero_grad()

    def evaluate(probe, shape, name):
        params.set(name, probe.reshape(shape))
        pattern = ActivationPattern()
        with pattern:
            value = _scalar(f())
        return value, pattern

    errors: dict[str, float] = {}
    checked: dict[str, int] = {}
    skipped: dict[str, int] = {}
    for name in names:
        original = params[name].data.copy()
        flat_orig = original.reshape(-1)
        size = original.size
        if max_entries is not None and size > max_entries:
            idx = rng.choice(size, size=max_entries, replace=False)
        else:
            idx = np.arange(size)
        a_full = analytic[name].reshape(-1)
        kept, numeric = [], []
        for flat in idx:
            probe = flat_orig.copy()
            probe[flat] = flat_orig[flat] + epsilon
            up, up_pattern = evaluate(probe, original.shape, name)
            probe[flat] = flat_orig[flat] - epsilon
            down, down_pattern = evaluate(probe, original.shape, name)
            if skip_kinks and up_pattern != down_pattern:
                continue
            kept.append(flat)
            numeric.append((up - down) / (2 * epsilon))
        params.set(name, original)
        kept_idx, numeric = np.array(kept, dtype=int), np.array(numeric)
        scale = max(np.abs(a_full).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(a_full[kept_idx] - numeric).max(initial=0.0)
        errors[name] = float(diff / max(scale, floor))
        checked[name] = len(kept)
        skipped[name] = len(idx) - len(kept)
    return GradcheckReport(errors=errors, tolerance=tolerance, epsilon=epsilon, checked_entries=checked, floor=floor,
                           skipped_entries=skipped)
