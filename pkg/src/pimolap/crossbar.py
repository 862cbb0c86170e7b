"""Memory cell arrays executing column-wise bitwise logic.

A :class:`CellArray` is a rows x cols bit matrix. One column op applies a
boolean function over whole source columns and writes a destination column,
for every row at once; that is the unit of in-memory parallelism everything
above this module compiles down to.

Bits are packed column-major into uint64 words. Two interchangeable kernels
execute op programs over the packed matrix: a compiled extension
(``pimolap._kernels``) and a numpy fallback (``pimolap._kernels_py``),
selected at import and overridable per array or via ``PIMOLAP_KERNEL``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _native
except ImportError:  # extension not built; numpy fallback only
    _native = None


class OpKind(IntEnum):
    """Native column op set, one simulator step each."""

    NOT = 0
    AND = 1
    OR = 2
    NOR = 3
    XOR = 4
    COPY = 5
    SET0 = 6
    SET1 = 7


_ARITY = {
    OpKind.NOT: 1,
    OpKind.AND: 2,
    OpKind.OR: 2,
    OpKind.NOR: 2,
    OpKind.XOR: 2,
    OpKind.COPY: 1,
    OpKind.SET0: 0,
    OpKind.SET1: 0,
}


@dataclass(frozen=True)
class ColOp:
    """One column-wise logic op: ``dest = kind(*srcs)``."""

    kind: OpKind
    srcs: tuple[int, ...]
    dest: int

    def __post_init__(self):
        if len(self.srcs) != _ARITY[self.kind]:
            raise ValueError(
                f"{self.kind.name} takes {_ARITY[self.kind]} sources, "
                f"got {len(self.srcs)}: {self}"
            )

    def __str__(self):
        args = " ".join(f"c{s}" for s in self.srcs)
        return f"{self.kind.name} {args} -> c{self.dest}".replace("  ", " ")


def available_backends() -> list[str]:
    backends = ["py"]
    if _native is not None:
        backends.insert(0, "native")
    return backends


def default_backend() -> str:
    forced = os.environ.get("PIMOLAP_KERNEL", "auto")
    if forced in ("py", "native"):
        return forced
    return "native" if _native is not None else "py"


def _resolve_kernel(backend: str):
    if backend == "auto":
        backend = default_backend()
    if backend == "py":
        return _kernels_py
    if backend == "native":
        if _native is None:
            raise RuntimeError("compiled kernel requested but not built")
        return _native
    raise ValueError(f"unknown kernel backend {backend!r}")


def encode_ops(ops: Iterable[ColOp], cols: int) -> np.ndarray:
    """Validate ops against a column count and pack them for the kernels."""
    rows = []
    for op in ops:
        for c in (*op.srcs, op.dest):
            if not 0 <= c < cols:
                raise IndexError(f"column {c} out of range for {cols} columns in {op}")
        s = op.srcs
        rows.append((int(op.kind), s[0] if s else -1, s[1] if len(s) > 1 else -1, op.dest))
    return np.array(rows, dtype=np.int32).reshape(-1, 4)


def bits_from_str(text: str) -> np.ndarray:
    """'1010' -> array([1, 0, 1, 0]); index i is column (or row) i."""
    return np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0")


class CellArray:
    """A rows x cols bit matrix with column-op execution and counters.

    ``op_count`` counts executed column ops; ``write_count`` counts bit
    writes (rows bits per column op, cols bits per host row write).
    Modeled circuits attached to the array may also charge the counters
    through :meth:`charge`.
    """

    def __init__(self, rows: int, cols: int, backend: str = "auto"):
        if rows < 1 or cols < 1:
            raise ValueError(f"array dimensions must be positive, got {rows}x{cols}")
        self.rows = rows
        self.cols = cols
        self._kernel = _resolve_kernel(backend)
        self._n_words = (rows + 63) // 64
        rem = rows % 64
        self._last_word_mask = (1 << rem) - 1 if rem else 0xFFFFFFFFFFFFFFFF
        self._words = np.zeros((cols, self._n_words), dtype=np.uint64)
        self.op_count = 0
        self.write_count = 0

    @property
    def backend(self) -> str:
        return self._kernel.NAME

    # -- column ops ---------------------------------------------------------

    def exec_col_op(self, op: ColOp) -> None:
        self.exec_encoded(encode_ops([op], self.cols))

    def exec_ops(self, ops: Sequence[ColOp]) -> None:
        self.exec_encoded(encode_ops(ops, self.cols))

    def exec_encoded(self, encoded: np.ndarray) -> None:
        """Run a pre-encoded (n, 4) int32 op program (see :func:`encode_ops`)."""
        self._kernel.execute_ops(self._words, encoded, self._last_word_mask)
        n = len(encoded)
        self.op_count += n
        self.write_count += n * self.rows

    def charge(self, ops: int, writes: int) -> None:
        """Account work done by a modeled peripheral/in-array circuit."""
        self.op_count += ops
        self.write_count += writes

    # -- host load/store path ----------------------------------------------

    def _coerce_bits(self, bits, length: int) -> np.ndarray:
        if isinstance(bits, str):
            bits = bits_from_str(bits)
        arr = np.asarray(bits, dtype=np.uint8)
        if arr.shape != (length,):
            raise ValueError(f"expected {length} bits, got shape {arr.shape}")
        return arr

    def write_row(self, row: int, bits) -> None:
        if not 0 <= row < self.rows:
            raise IndexError(f"row {row} out of range for {self.rows} rows")
        arr = self._coerce_bits(bits, self.cols).astype(np.uint64)
        w, b = divmod(row, 64)
        keep = np.uint64(~(1 << b) & 0xFFFFFFFFFFFFFFFF)
        self._words[:, w] = (self._words[:, w] & keep) | (arr << np.uint64(b))
        self.write_count += self.cols

    def write_rows(self, bit_matrix: np.ndarray) -> None:
        """Bulk-store rows 0..n-1 from an (n, cols) 0/1 matrix."""
        mat = np.asarray(bit_matrix, dtype=np.uint8)
        n = mat.shape[0]
        if n > self.rows or mat.shape[1] != self.cols:
            raise ValueError(f"bad bulk shape {mat.shape} for {self.rows}x{self.cols}")
        packed = np.packbits(np.ascontiguousarray(mat.T), axis=1, bitorder="little")
        padded = np.zeros((self.cols, self._n_words * 8), dtype=np.uint8)
        padded[:, : packed.shape[1]] = packed
        new = padded.view("<u8")
        full, rem = divmod(n, 64)
        self._words[:, :full] = new[:, :full]
        if rem:
            m = np.uint64((1 << rem) - 1)
            self._words[:, full] = (self._words[:, full] & ~m) | (new[:, full] & m)
        self.write_count += n * self.cols

    def read_row(self, row: int) -> np.ndarray:
        if not 0 <= row < self.rows:
            raise IndexError(f"row {row} out of range for {self.rows} rows")
        w, b = divmod(row, 64)
        return ((self._words[:, w] >> np.uint64(b)) & np.uint64(1)).astype(np.uint8)

    def read_col(self, col: int) -> np.ndarray:
        if not 0 <= col < self.cols:
            raise IndexError(f"column {col} out of range for {self.cols} columns")
        raw = self._words[col].view(np.uint8)
        return np.unpackbits(raw, count=self.rows, bitorder="little")

    def read_field(self, cols: Sequence[int]) -> np.ndarray:
        """Per-row values of a multi-column field, bit k at ``cols[k]``.

        Returns uint64; callers handle signed decode.
        """
        out = np.zeros(self.rows, dtype=np.uint64)
        for k, c in enumerate(cols):
            out |= self.read_col(c).astype(np.uint64) << np.uint64(k)
        return out

    def write_field(self, cols: Sequence[int], values: np.ndarray) -> None:
        """Per-row store of a multi-column field (host path, bulk)."""
        vals = np.asarray(values, dtype=np.uint64)
        if vals.shape != (self.rows,):
            raise ValueError(f"expected {self.rows} values, got {vals.shape}")
        for k, c in enumerate(cols):
            bits = ((vals >> np.uint64(k)) & np.uint64(1)).astype(np.uint8)
            packed = np.packbits(bits, bitorder="little")
            raw = np.zeros(self._n_words * 8, dtype=np.uint8)
            raw[: len(packed)] = packed
            self._words[c] = raw.view("<u8")
        self.write_count += self.rows * len(cols)

    def copy_col_words(self, col: int) -> np.ndarray:
        return self._words[col].copy()

    def set_col_words(self, col: int, words: np.ndarray) -> None:
        self._words[col] = words
        self._words[col, -1] &= np.uint64(self._last_word_mask)
        self.write_count += self.rows

    def __repr__(self):
        return (
            f"CellArray({self.rows}x{self.cols}, backend={self.backend}, "
            f"ops={self.op_count}, writes={self.write_count})"
        )
