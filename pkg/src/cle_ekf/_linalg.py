"""Small dense products with a fixed accumulation order.

numpy's ``@`` and ``sum`` pick kernels (BLAS, SIMD pairwise reductions) by
array shape, so the same 4x4 product can round differently inside a batch
of one and a batch of a hundred. These helpers accumulate term by term with
elementwise operations only, which makes every entry of a batched result
bit-identical to the unbatched one.
"""

import numpy as np


def matmul(A, B):
    """``A @ B`` over the last two axes, broadcasting leading axes."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    out = A[..., :, 0, None] * B[..., 0, None, :]
    for k in range(1, A.shape[-1]):
        out = out + A[..., :, k, None] * B[..., k, None, :]
    return out


def matvec(A, x):
    """``A @ x`` for matrices ``(..., r, c)`` and vectors ``(..., c)``."""
    A = np.asarray(A, dtype=float)
    x = np.asarray(x, dtype=float)
    out = A[..., :, 0] * x[..., None, 0]
    for k in range(1, A.shape[-1]):
        out = out + A[..., :, k] * x[..., None, k]
    return out


def transpose(A):
    return np.swapaxes(A, -1, -2)
