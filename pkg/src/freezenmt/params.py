"""Named, component-tagged parameters."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import DTYPE, Tape, Tensor


class Component(enum.IntEnum):
    """The five subnetworks of the translation model.

    The integer values are the on-disk tags used by checkpoint files.
    Attention has no parameters of its own; everything downstream of the
    attention context is tagged ``DECODER``.
    """

    SOURCE_EMBEDDING = 0
    ENCODER = 1
    DECODER = 2
    SOFTMAX = 3
    TARGET_EMBEDDING = 4

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, text: str) -> "Component":
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        for comp, label in _LABELS.items():
            if key in (label.replace("-", "_"), comp.name.lower()):
                return comp
        if key in _ALIASES:
            return _ALIASES[key]
        raise ValueError(f"unknown component {text!r}; expected one of {', '.join(_LABELS.values())}")


_LABELS = {
    Component.SOURCE_EMBEDDING: "source-embedding",
    Component.ENCODER: "encoder",
    Component.DECODER: "decoder",
    Component.SOFTMAX: "softmax",
    Component.TARGET_EMBEDDING: "target-embedding",
}
_ALIASES = {
    "src_emb": Component.SOURCE_EMBEDDING,
    "source_embed": Component.SOURCE_EMBEDDING,
    "tgt_emb": Component.TARGET_EMBEDDING,
    "target_embed": Component.TARGET_EMBEDDING,
}


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    component: Component
    trainable: bool = True
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def leaf(self) -> Tensor:
        """A graph leaf bound to this parameter for the active tape.

        Frozen parameters become constants, so no gradient ever reaches them.
        """
        t = Tensor(self.value, requires_grad=self.trainable)
        tape = Tape.current()
        if self.trainable and tape is not None:
            t.param = self
            tape.leaves.append(t)
        return t

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class ParameterStore:
    """Insertion-ordered mapping of name -> Parameter with a component index."""

    def __init__(self, params: list[Parameter] | None = None):
        self._params: dict[str, Parameter] = {}
        for p in params or ():
            self.add(p)

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        if not isinstance(param.component, Component):
            raise TypeError(f"parameter {param.name!r} has no component tag")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def by_component(self, component: Component) -> list[Parameter]:
        return [p for p in self._params.values() if p.component == component]

    def components(self) -> set[Component]:
        return {p.component for p in self._params.values()}

    def leaves(self) -> dict[str, Tensor]:
        return {name: p.leaf() for name, p in self._params.items()}

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for p in self._params.values():
            out.add(Parameter(p.name, p.value.copy(), p.component, p.trainable))
        return out

    def trainable_count(self) -> int:
        return sum(p.size for p in self._params.values() if p.trainable)


def count_params(store: ParameterStore, component: Component) -> int:
    return sum(p.size for p in store.by_component(component))
