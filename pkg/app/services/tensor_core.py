"""Dense float32 kernels used by the GPT-2 forward pass.

Every kernel is a pure function over numpy arrays. Batch axes in front of the
documented ones are allowed so the model can run all heads and positions in
one call; results are row-for-row identical to the single-row case.
"""
import numpy as np
import numpy.typing as npt

from app.errors import MaskedRowError, TensorShapeError

Tensor = npt.NDArray[np.float32]

DTYPE = np.float32
_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


def as_tensor(values) -> Tensor:
    """Coerce nested lists / arrays to a contiguous float32 array."""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if arr.size == 0 or any(dim <= 0 for dim in arr.shape):
        raise TensorShapeError(f"tensor dimensions must be positive, got {arr.shape}")
    return arr


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise TensorShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b, dtype=DTYPE)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction. -inf entries act as a mask."""
    row_max = np.max(x, axis=-1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise MaskedRowError("softmax over a row where every entry is masked")
    exp = np.exp(x - row_max)
    return (exp / np.sum(exp, axis=-1, keepdims=True)).astype(DTYPE, copy=False)


def log_softmax(x: Tensor) -> npt.NDArray[np.float64]:
    # float64 here: metrics compare probabilities of tokens far down the distribution
    x64 = np.asarray(x, dtype=np.float64)
    shifted = x64 - np.max(x64, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    """Normalize over the last axis.

    Returns the normalized output and the divisor sqrt(var + eps) for each row
    (a 0-d array for a single vector), which direct logit attribution reuses
    as a frozen scale.
    """
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise TensorShapeError(
            f"layer_norm width {x.shape[-1]} does not match gain/bias {gain.shape}/{bias.shape}")
    centered = x - np.mean(x, axis=-1, keepdims=True)
    scale = np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + DTYPE(eps))
    out = centered / scale * gain + bias
    return out.astype(DTYPE, copy=False), scale[..., 0].astype(DTYPE, copy=False)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation, the variant GPT-2 was trained with
    x = np.asarray(x, dtype=DTYPE)
    return (0.5 * x * (1.0 + np.tanh(_GELU_C * (x + DTYPE(0.044715) * x ** 3)))).astype(DTYPE, copy=False)


def causal_mask(seq_len: int) -> npt.NDArray[np.bool_]:
    """True where query i may not see key j (j > i)."""
    return np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
