from __future__ import annotations

import dataclasses
import textwrap
import threading
from contextlib import contextmanager
from dataclasses import dataclass, fields
from typing import Any, Callable, Iterable, List, Optional, Tuple

import torch
import torch.utils._pytree as pytree
from torch import Tensor
from typing_extensions import Self, dataclass_transform

from purifycert import config
from purifycert.utils import PytreeRegistered

DATACLASS_ARGS = {"init", "repr", "eq", "order", "unsafe_hash", "frozen", "slots"}


@dataclass_transform(eq_default=False, kw_only_default=True)
class TensorTableTransform:
    """Only needed for type hints. Directly decorating TensorTable does not work."""

    pass


class TensorTable(PytreeRegistered, TensorTableTransform):
    """A keyword-only dataclass of tensors that share a leading component dimension.

    Every prototype set, mixture and posterior table in purifycert is a
    TensorTable: one row per component, arbitrary trailing (event)
    dimensions per field. Subclasses are turned into keyword-only
    dataclasses automatically:

        >>> class Weighted(TensorTable):
        ...     positions: torch.Tensor   # (K, d)
        ...     weights: torch.Tensor     # (K,)
        >>> table = Weighted(positions=torch.zeros(3, 2), weights=torch.ones(3) / 3)
        >>> table.shape
        torch.Size([3])
        >>> table[table.weights > 0.2].shape
        torch.Size([3])

    `shape` is inferred from the first tensor field when not given. Tables
    are registered as PyTrees, so tensor fields are leaves and every other
    field travels as metadata through `pytree.tree_map`.

    Raises:
        RuntimeError: if a tensor field's leading dimensions differ from `shape`.
        TypeError: if a subclass declares `shape` itself or asks for eq=True.
    """

    shape: Optional[torch.Size]

    _validation_disabled = threading.local()

    def __init_subclass__(cls, **kwargs):
        # dataclass(slots=True) builds a throwaway class that re-enters here.
        if "__slots__" in cls.__dict__:
            return

        annotations = cls.__dict__.get("__annotations__", {})
        if "shape" in annotations:
            raise TypeError(
                f"Cannot define reserved field 'shape' in {cls.__name__}; "
                "it is provided by TensorTable."
            )
        cls.__annotations__ = {**annotations, "shape": Optional[torch.Size]}
        cls.shape = None

        dc_kwargs = {}
        for k in list(kwargs.keys()):
            if k in DATACLASS_ARGS:
                dc_kwargs[k] = kwargs.pop(k)

        super().__init_subclass__(**kwargs)

        if dc_kwargs.get("eq") is True:
            raise TypeError(
                f"Cannot create {cls.__name__} with eq=True. TensorTable requires eq=False."
            )
        dc_kwargs.setdefault("eq", False)
        # keep the table-aware __repr__ below
        dc_kwargs.setdefault("repr", False)
        dc_kwargs["kw_only"] = True

        dataclass(cls, **dc_kwargs)

    def __post_init__(self):
        if self.shape is None:
            for f in fields(self):
                val = getattr(self, f.name)
                if isinstance(val, Tensor):
                    self.shape = torch.Size(val.shape[:1])
                    break
            else:
                self.shape = torch.Size([0])
        else:
            self.shape = torch.Size(self.shape)
        if config.validate_args:
            self._validate()

    @classmethod
    @contextmanager
    def unsafe_construction(cls):
        """Disables leading-shape validation for tables built inside the block."""
        old_value = getattr(cls._validation_disabled, "value", False)
        cls._validation_disabled.value = True
        try:
            yield
        finally:
            cls._validation_disabled.value = old_value

    def _validate(self):
        if getattr(self._validation_disabled, "value", False):
            return
        n = len(self.shape)
        for name, value in self._tensor_items():
            if tuple(value.shape[:n]) != tuple(self.shape):
                raise RuntimeError(
                    f"Validation error at field {name}: invalid shape {tuple(value.shape)}. "
                    f"Expected leading dimensions {tuple(self.shape)}"
                )

    def _tensor_items(self) -> List[Tuple[str, Tensor]]:
        return [
            (f.name, getattr(self, f.name))
            for f in fields(self)
            if isinstance(getattr(self, f.name), Tensor)
        ]

    # --- PyTree protocol ---

    def _pytree_flatten(self) -> Tuple[List[Any], Any]:
        flat_names = []
        flat_values = []
        meta_data = {}
        for f in fields(self):
            if f.name == "shape":
                continue
            val = getattr(self, f.name)
            if isinstance(val, Tensor):
                flat_names.append(f.name)
                flat_values.append(val)
            else:
                meta_data[f.name] = val
        return flat_values, (flat_names, meta_data)

    def _pytree_flatten_with_keys_fn(
        self,
    ) -> Tuple[List[Tuple[pytree.KeyEntry, Any]], Any]:
        flat_values, context = self._pytree_flatten()
        return [
            (pytree.GetAttrKey(k), v) for k, v in zip(context[0], flat_values)
        ], context

    @classmethod
    def _pytree_unflatten(cls, leaves: Iterable[Any], context: Any) -> TensorTable:
        flat_names, meta_data = context
        # shape is re-inferred from the (possibly transformed) leaves
        return cls(**dict(zip(flat_names, leaves)), **meta_data)

    @classmethod
    def _tree_map(cls, func: Callable[[Tensor], Tensor], tree: Any) -> Any:
        def wrapped_func(keypath, x):
            try:
                return func(x)
            except Exception as e:
                path = "".join(str(k) for k in keypath).lstrip(".")
                raise type(e)(f"Error at path {path}: {type(e).__name__}: {e}") from e

        return pytree.tree_map_with_path(wrapped_func, tree)

    # --- Table operations ---

    def __len__(self) -> int:
        return self.shape[0] if len(self.shape) else 0

    def __getitem__(self, key: Any) -> Self:
        """Selects components; integer keys keep the component dimension."""
        if isinstance(key, int):
            key = slice(key, key + 1 if key != -1 else None)
        return TensorTable._tree_map(lambda x: x[key], self)

    def __repr__(self) -> str:
        indent = "    "
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "shape":
                continue
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                content = f"Tensor(shape={tuple(value.shape)}, dtype={value.dtype})"
            else:
                content = repr(value)
            lines.append(f"{f.name}: {content}")
        return (
            f"{self.__class__.__name__}(\n"
            f"{indent}shape={tuple(self.shape)},\n"
            f"{textwrap.indent(chr(10).join(lines), indent)}\n"
            f")"
        )
