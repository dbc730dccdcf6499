from abc import abstractmethod
from typing import Any, Iterable, List, Sequence, Tuple, Type, TypeVar, Union

import torch
import torch.utils._pytree as pytree
from torch import Tensor
from torch.utils._pytree import Context, KeyEntry, PyTree

from purifycert import config
from purifycert.errors import DimensionMismatchError

_PytreeRegistered = TypeVar("_PytreeRegistered", bound="PytreeRegistered")

PointLike = Union[Tensor, Sequence[float], Sequence[Sequence[float]]]


class PytreeRegistered:
    """
    Mixin that registers every subclass with the PyTorch PyTree system
    when the subclass is defined.
    """

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)

        pytree.register_pytree_node(
            cls,
            cls._pytree_flatten,
            cls._pytree_unflatten,
            flatten_with_keys_fn=cls._pytree_flatten_with_keys_fn,
        )

    @abstractmethod
    def _pytree_flatten(self) -> Tuple[List[Any], Context]:
        pass

    @abstractmethod
    def _pytree_flatten_with_keys_fn(
        self,
    ) -> Tuple[List[Tuple[KeyEntry, Any]], Any]:
        pass

    @classmethod
    @abstractmethod
    def _pytree_unflatten(
        cls: Type[_PytreeRegistered], leaves: Iterable[Any], context: Context
    ) -> PyTree:
        pass


def as_tensor(value: PointLike) -> Tensor:
    """Converts lists and tensors to the library dtype without copying when possible."""
    if isinstance(value, Tensor):
        return value.to(config.dtype)
    return torch.as_tensor(value, dtype=config.dtype)


def as_points(x: PointLike, dimension: int) -> Tuple[Tensor, bool]:
    """
    Returns `x` as a `(batch, dimension)` tensor and whether the input was a
    single point, so callers can squeeze their result back.

    Raises:
        DimensionMismatchError: if the trailing dimension is not `dimension`.
    """
    t = as_tensor(x)
    single = t.ndim == 1
    if single:
        t = t.unsqueeze(0)
    if t.ndim != 2 or t.shape[-1] != dimension:
        raise DimensionMismatchError(
            f"Expected points of dimension {dimension}, got shape {tuple(t.shape)}",
            t,
        )
    return t, single


def squeeze_if(value: Tensor, single: bool) -> Tensor:
    return value[0] if single else value
