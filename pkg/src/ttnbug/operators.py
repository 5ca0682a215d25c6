"""
Linear operators given as sums of Kronecker products.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .tensor_core import as_tensor, mode_product


@dataclass
class SumOfProductsOperator:
    """
    ``H = sum_k coeffs[k] * kron_l terms[k][l]`` acting on tensors of shape `dims`.

    Each term maps a mode index to an ``n_l x n_l`` factor; absent modes act
    as the identity. Mode ``l`` of the tensor corresponds to leaf id ``l``.
    """
    dims: Sequence[int]
    terms: List[Dict[int, np.ndarray]] = field(default_factory=list)
    coeffs: List[complex] = field(default_factory=list)

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.coeffs) == 0 and self.terms:
            self.coeffs = [1.0] * len(self.terms)
        if len(self.coeffs) != len(self.terms):
            raise ValueError("number of coefficients and terms differ")
        self.terms = [{int(l): as_tensor(m) for l, m in t.items()} for t in self.terms]
        self.coeffs = [complex(c) for c in self.coeffs]
        for t in self.terms:
            for l, m in t.items():
                if not 0 <= l < len(self.dims):
                    raise ValueError(f"factor for unknown mode {l}")
                if m.shape != (self.dims[l], self.dims[l]):
                    raise ValueError(f"factor on mode {l} has shape {m.shape}, expected square of size {self.dims[l]}")

    @property
    def nterms(self) -> int:
        return len(self.terms)

    def add_term(self, factors: Dict[int, np.ndarray], coeff: complex = 1.0):
        self.terms.append({int(l): as_tensor(m) for l, m in factors.items()})
        self.coeffs.append(complex(coeff))
        self.__post_init__()
        return self

    def scaled(self, alpha: complex) -> "SumOfProductsOperator":
        return SumOfProductsOperator(self.dims, [dict(t) for t in self.terms],
                                     [alpha * c for c in self.coeffs])

    def __add__(self, other: "SumOfProductsOperator") -> "SumOfProductsOperator":
        if self.dims != other.dims:
            raise ValueError("operator dimensions differ")
        return SumOfProductsOperator(self.dims, self.terms + other.terms, self.coeffs + other.coeffs)

    def factor(self, k: int, l: int):
        """Factor of term `k` on mode `l`, or None for the identity."""
        return self.terms[k].get(l)

    def apply(self, y) -> np.ndarray:
        """
        Apply the operator to a dense tensor of shape `dims`.
        """
        y = as_tensor(y)
        if y.shape != self.dims:
            raise ValueError(f"tensor of shape {y.shape} does not match operator dims {self.dims}")
        out = np.zeros_like(y)
        for c, t in zip(self.coeffs, self.terms):
            z = y
            for l, m in t.items():
                z = mode_product(z, m, l)
            out += c * z
        return out

    __call__ = apply

    def to_dense(self) -> np.ndarray:
        """
        Dense matrix acting on first-mode-fastest vectorizations,
        i.e. ``kron(A_d, ..., A_1)`` per term.
        """
        size = int(np.prod(self.dims, dtype=int))
        if size > 2**14:
            raise MemoryError(f"dense operator of size {size} exceeds guard 2^14")
        h = np.zeros((size, size), dtype=complex)
        for c, t in zip(self.coeffs, self.terms):
            m = np.ones((1, 1), dtype=complex)
            for l in range(len(self.dims)):
                m = np.kron(t.get(l, np.identity(self.dims[l])), m)
            h += c * m
        return h
