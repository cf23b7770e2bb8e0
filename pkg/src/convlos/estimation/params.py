"""Packing model parameters into one unconstrained vector.

Each free parameter contributes its coefficient vector on the link scale
(one entry for a constant parameter), so optimisers work on all of R^d and
mapping back through the links can never leave a parameter's domain.
Multinomial weights use log-ratios against the first category.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..distributions import MULTINOMIAL
from ..links import ParameterMap, link_forward, link_inverse
from ..mixture import MixtureModel

SHORT = ("mu_S", "sigma_S")
CONT = ("m", "sigma")


@dataclass(frozen=True)
class Slot:
    target: str
    link: str
    columns: tuple[str, ...]
    start: int
    size: int

    @property
    def index(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.size)

    @property
    def is_constant(self) -> bool:
        return not self.columns


class Layout:
    """Which parameters are free, where they live in ``theta``, and their links."""

    def __init__(self, template: MixtureModel, fixed=()):
        self.template = template
        self.fixed = tuple(fixed)
        slots = []
        pos = 0
        for target in template.targets():
            if target in self.fixed:
                continue
            pmap = template.parameter_maps.get(target)
            if pmap is None:
                slots.append(Slot(target, ParameterMap.constant(target, 1.0).link, (), pos, 1))
                pos += 1
            else:
                slots.append(Slot(target, pmap.link, pmap.selected_columns, pos, pmap.beta.size))
                pos += pmap.beta.size
        count = template.long.count
        if count.family == MULTINOMIAL and "weights" not in self.fixed and len(count.weights) > 1:
            slots.append(Slot("weights", "softmax", (), pos, len(count.weights) - 1))
            pos += len(count.weights) - 1
        self.slots = tuple(slots)
        self.size = pos
        self._by_target = {s.target: s for s in slots}

    def __contains__(self, target) -> bool:
        return target in self._by_target

    def slot(self, target: str) -> Slot:
        return self._by_target[target]

    def free(self, targets) -> list[str]:
        return [t for t in targets if t in self._by_target]

    def index(self, targets) -> np.ndarray:
        idx = [self._by_target[t].index for t in targets if t in self._by_target]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=int)

    def long_targets(self) -> list[str]:
        count_targets = [s.target for s in self.slots if s.target not in ("pi",) + SHORT + CONT]
        return count_targets + self.free(CONT)

    def count_targets(self) -> list[str]:
        return [s.target for s in self.slots if s.target not in ("pi",) + SHORT + CONT]

    def is_constant(self, target: str) -> bool:
        return target not in self._by_target or self._by_target[target].is_constant

    def pack(self, model: MixtureModel) -> np.ndarray:
        theta = np.empty(self.size)
        for slot in self.slots:
            if slot.target == "weights":
                w = np.maximum(model.long.count.weights, 1e-300)
                theta[slot.index] = np.log(w[1:]) - np.log(w[0])
                continue
            pmap = model.parameter_maps.get(slot.target)
            if pmap is not None:
                theta[slot.index] = pmap.beta
            else:
                theta[slot.index] = link_inverse(slot.link, model.value(slot.target))
        return theta

    def unpack(self, theta) -> MixtureModel:
        theta = np.asarray(theta, dtype=float)
        values = {}
        maps = {}
        for slot in self.slots:
            beta = theta[slot.index]
            if slot.target == "weights":
                logits = np.concatenate([[0.0], beta])
                w = np.exp(logits - logits.max())
                w /= w.sum()
                values["weights"] = w
                continue
            if slot.is_constant:
                values[slot.target] = float(link_forward(slot.link, beta[0]))
                if slot.target in self.template.parameter_maps:
                    maps[slot.target] = ParameterMap(slot.target, beta, (), slot.link)
            else:
                maps[slot.target] = ParameterMap(slot.target, beta, slot.columns, slot.link)
        return self.template.with_values(values).with_maps(maps)
