"""Pure-numpy column-op kernel, the fallback when the compiled one is absent.

Bit matrices are stored column-major packed: ``words[c, w]`` holds rows
``64*w .. 64*w+63`` of column ``c``, least significant bit = lowest row.
Inverting ops mask the trailing partial word so bits past the row count
stay zero.
"""

from __future__ import annotations

import numpy as np

NAME = "py"

# op codes shared with the compiled kernel; must match crossbar.OpKind
K_NOT, K_AND, K_OR, K_NOR, K_XOR, K_COPY, K_SET0, K_SET1 = range(8)

_FULL = np.uint64(0xFFFFFFFFFFFFFFFF)


def execute_ops(words: np.ndarray, ops: np.ndarray, last_word_mask: int) -> None:
    """Run encoded ops in place over a packed (cols, n_words) uint64 matrix.

    ``ops`` is an (n, 4) int32 array of (kind, src0, src1, dest) rows;
    unused source slots are -1.
    """
    mask = np.uint64(last_word_mask)
    for kind, s0, s1, d in ops:
        if kind == K_AND:
            np.bitwise_and(words[s0], words[s1], out=words[d])
        elif kind == K_OR:
            np.bitwise_or(words[s0], words[s1], out=words[d])
        elif kind == K_XOR:
            np.bitwise_xor(words[s0], words[s1], out=words[d])
        elif kind == K_NOT:
            np.bitwise_xor(words[s0], _FULL, out=words[d])
            words[d, -1] &= mask
        elif kind == K_NOR:
            np.bitwise_or(words[s0], words[s1], out=words[d])
            np.bitwise_xor(words[d], _FULL, out=words[d])
            words[d, -1] &= mask
        elif kind == K_COPY:
            words[d] = words[s0]
        elif kind == K_SET0:
            words[d] = 0
        elif kind == K_SET1:
            words[d] = _FULL
            words[d, -1] &= mask
        else:
            raise ValueError(f"unknown op kind code {kind}")
