"""Small dense/sparse tensor kit: CSR matrices, a differentiation tape, Adam."""
from .adam import AdamState, adam_step
from .gradcheck import finite_diff_grad, relative_error
from .sparse import SparseMatrix
from .tape import (
    ACTIVATIONS,
    Tape,
    TapeError,
    Var,
    activation,
    add,
    concat,
    const,
    huber_loss,
    matmul,
    mul,
    reshape,
    spmm,
    total,
    transpose,
)

__all__ = [
    "ACTIVATIONS", "AdamState", "SparseMatrix", "Tape", "TapeError", "Var",
    "activation", "adam_step", "add", "concat", "const", "finite_diff_grad",
    "huber_loss", "matmul", "mul", "relative_error", "reshape", "spmm",
    "total", "transpose",
]
