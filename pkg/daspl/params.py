"""
Parameter Store Module

Named registry of trainable tensors shared by the model, the optimizer and the
checkpoint writer. Names are dotted paths such as ``encoder.mha.w_q``; order
of registration is the iteration order everywhere.
"""

import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from daspl.autodiff import Tensor
from daspl.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

INITS = ("zeros", "ones", "normal", "constant")


class ParamStore:
    """Ordered mapping of unique parameter names to leaf tensors."""

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}

    def create(
        self,
        name: str,
        shape: Sequence[int],
        init: str = "normal",
        rng: Optional[np.random.Generator] = None,
        value: float = 0.0,
    ) -> Tensor:
        """
        Register a new trainable tensor.

        Args:
            name (str): Unique dotted name.
            shape: Tensor shape.
            init (str): One of ``zeros``, ``ones``, ``normal`` (Glorot-scaled
                        Gaussian) or ``constant`` (filled with ``value``).
            rng: Generator used by ``normal``.
            value (float): Fill value for ``constant``.

        Returns:
            Tensor: The registered leaf, ``requires_grad=True``.

        Raises:
            ContractError: Duplicate name, unknown init, or ``normal`` without
                           a generator.
        """
        if name in self._params:
            raise ContractError(f"parameter '{name}' already registered")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "constant":
            data = np.full(shape, float(value))
        elif init == "normal":
            if rng is None:
                raise ContractError(f"parameter '{name}': normal init needs an rng")
            fan_in = shape[0] if len(shape) >= 1 else 1
            fan_out = shape[-1] if len(shape) >= 2 else fan_in
            std = np.sqrt(2.0 / (fan_in + fan_out))
            data = rng.normal(0.0, std, size=shape)
        else:
            raise ContractError(f"unknown init '{init}', expected one of {INITS}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"no parameter named '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def tensors(self) -> List[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """
        Copy arrays into the registered tensors.

        Raises:
            ShapeError: An array's shape differs from its parameter's.
            ContractError: ``strict`` and the name sets differ.
        """
        if strict:
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            if missing or extra:
                raise ContractError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, array in state.items():
            if name not in self._params:
                continue
            target = self._params[name]
            array = np.asarray(array, dtype=np.float64)
            if array.shape != target.shape:
                raise ShapeError(f"parameter '{name}': expected shape {target.shape}, got {array.shape}")
            target.data = array.copy()
        logger.debug("loaded %d parameter arrays", len(state))
