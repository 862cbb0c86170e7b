# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled column-op kernel: one C loop per program instead of one numpy
call per op. Same contract as _kernels_py.execute_ops."""

import numpy as np

cimport numpy as cnp

NAME = "native"

cdef enum:
    K_NOT = 0
    K_AND = 1
    K_OR = 2
    K_NOR = 3
    K_XOR = 4
    K_COPY = 5
    K_SET0 = 6
    K_SET1 = 7


def execute_ops(cnp.uint64_t[:, ::1] words, cnp.int32_t[:, ::1] ops,
                unsigned long long last_word_mask):
    cdef Py_ssize_t n_ops = ops.shape[0]
    cdef Py_ssize_t n_words = words.shape[1]
    cdef Py_ssize_t i, w, last = n_words - 1
    cdef int kind, s0, s1, d
    cdef cnp.uint64_t full = <cnp.uint64_t> 0xFFFFFFFFFFFFFFFFULL
    cdef cnp.uint64_t mask = <cnp.uint64_t> last_word_mask

    for i in range(n_ops):
        kind = ops[i, 0]
        s0 = ops[i, 1]
        s1 = ops[i, 2]
        d = ops[i, 3]
        if kind == K_AND:
            for w in range(n_words):
                words[d, w] = words[s0, w] & words[s1, w]
        elif kind == K_OR:
            for w in range(n_words):
                words[d, w] = words[s0, w] | words[s1, w]
        elif kind == K_XOR:
            for w in range(n_words):
                words[d, w] = words[s0, w] ^ words[s1, w]
        elif kind == K_NOT:
            for w in range(n_words):
                words[d, w] = ~words[s0, w]
            words[d, last] = words[d, last] & mask
        elif kind == K_NOR:
            for w in range(n_words):
                words[d, w] = ~(words[s0, w] | words[s1, w])
            words[d, last] = words[d, last] & mask
        elif kind == K_COPY:
            for w in range(n_words):
                words[d, w] = words[s0, w]
        elif kind == K_SET0:
            for w in range(n_words):
                words[d, w] = 0
        elif kind == K_SET1:
            for w in range(n_words):
                words[d, w] = full
            words[d, last] = words[d, last] & mask
        else:
            raise ValueError(f"unknown op kind code {kind}")
