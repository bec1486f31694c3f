"""
ParamStore: an ordered, named collection of model weights.

The same type holds the online weights (trained by gradient) and the
average weights (updated only by the moving average).
"""
import hashlib
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from natlab.errors import ConfigMismatchError, ShapeError
from natlab.models.config import ModelConfig
from natlab.services.autodiff import TensorNode


class ParamStore:
    """Ordered map of parameter name -> TensorNode."""

    def __init__(self, config: Optional[ModelConfig] = None, params: Optional[Dict[str, TensorNode]] = None):
        self.config = config
        self._params: Dict[str, TensorNode] = dict(params or {})

    def __getitem__(self, name: str) -> TensorNode:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def add(self, name: str, value: np.ndarray, requires_grad: bool = True) -> TensorNode:
        if name in self._params:
            raise KeyError(f"Parameter '{name}' already exists")
        node = TensorNode(np.array(value, copy=True), requires_grad=requires_grad, name=name)
        self._params[name] = node
        return node

    @property
    def requires_grad(self) -> bool:
        return any(node.requires_grad for node in self._params.values())

    @property
    def dtype(self) -> np.dtype:
        first = next(iter(self._params.values()), None)
        return first.dtype if first is not None else np.dtype("float32")

    def copy(self, requires_grad: Optional[bool] = None) -> "ParamStore":
        """Deep copy; requires_grad defaults to the source's setting per tensor."""
        clone = ParamStore(self.config)
        for name, node in self._params.items():
            flag = node.requires_grad if requires_grad is None else requires_grad
            clone.add(name, node.value, requires_grad=flag)
        return clone

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: node.value for name, node in self._params.items()}

    @classmethod
    def from_arrays(
        cls, arrays: Dict[str, np.ndarray], config: Optional[ModelConfig] = None, requires_grad: bool = True
    ) -> "ParamStore":
        store = cls(config)
        for name, value in arrays.items():
            store.add(name, value, requires_grad=requires_grad)
        return store

    def zero_grad(self) -> None:
        for node in self._params.values():
            node.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        """Gradient per parameter; zeros where nothing reached the parameter."""
        return {
            name: node.grad if node.grad is not None else np.zeros_like(node.value)
            for name, node in self._params.items()
        }

    def num_parameters(self) -> int:
        return int(sum(node.value.size for node in self._params.values()))

    def digest(self) -> str:
        """sha256 over names, shapes, dtypes and raw bytes."""
        h = hashlib.sha256()
        for name, node in self._params.items():
            h.update(name.encode("utf-8"))
            h.update(str(node.shape).encode("ascii"))
            h.update(node.dtype.str.encode("ascii"))
            h.update(np.ascontiguousarray(node.value).tobytes())
        return h.hexdigest()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: node.shape for name, node in self._params.items()}

    def assert_compatible(self, other: "ParamStore") -> None:
        """
        Require identical key sets and shapes.

        Raises:
            ConfigMismatchError: If the key sets differ
            ShapeError: If a shared key has different shapes
        """
        mine, theirs = set(self._params), set(other._params)
        if mine != theirs:
            missing = sorted(mine - theirs)[:5]
            extra = sorted(theirs - mine)[:5]
            raise ConfigMismatchError(f"Parameter sets differ (missing: {missing}, unexpected: {extra})")
        for name, node in self._params.items():
            if node.shape != other[name].shape:
                raise ShapeError(name, node.shape, other[name].shape)
