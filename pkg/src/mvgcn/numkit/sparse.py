import numpy as np

from .. import kernels


class SparseMatrix:
    """Compressed-row matrix with sorted, duplicate-free column indices.

    Immutable after construction. ``matmul`` multiplies with a dense array
    whose leading axis matches ``cols``; trailing axes are flattened for the
    kernel and restored afterwards.
    """

    def __init__(self, shape, indptr, indices, data):
        self.shape = (int(shape[0]), int(shape[1]))
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self._check()
        self._t = None

    def _check(self):
        n_rows, n_cols = self.shape
        if self.indptr.shape != (n_rows + 1,) or self.indptr[0] != 0:
            raise ValueError("indptr must have rows+1 entries starting at 0")
        if np.any(np.diff(self.indptr) < 0) or self.indptr[-1] != len(self.indices):
            raise ValueError("indptr must be non-decreasing and end at nnz")
        if len(self.indices) != len(self.data):
            raise ValueError("indices and data lengths differ")
        if len(self.indices):
            if self.indices.min() < 0 or self.indices.max() >= n_cols:
                raise ValueError("column index out of range")
            steps = np.diff(self.indices)
            row_start = np.zeros(len(self.indices), dtype=bool)
            row_start[self.indptr[:-1][np.diff(self.indptr) > 0]] = True
            if np.any(steps[~row_start[1:]] <= 0):
                raise ValueError("column indices must strictly increase within a row")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite stored value")

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2:
            raise ValueError("expected a 2-d array")
        rows, cols = np.nonzero(dense)
        indptr = np.zeros(dense.shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(dense.shape, np.cumsum(indptr), cols, dense[rows, cols])

    @classmethod
    def identity(cls, n):
        return cls((n, n), np.arange(n + 1), np.arange(n), np.ones(n))

    @property
    def nnz(self):
        return len(self.data)

    def to_dense(self):
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        out[rows, self.indices] = self.data
        return out

    def transpose(self):
        if self._t is None:
            rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
            order = np.lexsort((rows, self.indices))
            counts = np.bincount(self.indices, minlength=self.shape[1])
            indptr = np.concatenate(([0], np.cumsum(counts)))
            self._t = SparseMatrix((self.shape[1], self.shape[0]), indptr,
                                   rows[order], self.data[order])
        return self._t

    @property
    def T(self):
        return self.transpose()

    def matmul(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.shape[1]:
            raise ValueError(f"spmm dimension mismatch: {self.shape} @ {x.shape}")
        flat = x.reshape(x.shape[0], -1)
        out = kernels.spmm_csr(self.indptr, self.indices, self.data, flat, self.shape[0])
        return out.reshape((self.shape[0],) + x.shape[1:])

    def __matmul__(self, x):
        return self.matmul(x)

    def is_symmetric(self, tol=0.0):
        if self.shape[0] != self.shape[1]:
            return False
        d = self.to_dense()
        return bool(np.all(np.abs(d - d.T) <= tol))

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"
