"""qsylv: rank-structured solvers for Sylvester and Lyapunov equations.

Quasiseparable coefficient matrices are stored in the HODLR format and the
equations are solved by the matrix sign iteration, a quadrature of the
exponential integral representation, matrix-form CG, or dense reference
algorithms, together with the singular-value decay bounds that justify the
approach.
"""

from .dense import gauss_legendre, solve_dense, sym_eig, truncated_svd
from .hodlr import (
    HodlrConfig,
    HodlrMatrix,
    LowRankFactor,
    add,
    deserialize,
    from_banded,
    from_dense,
    from_function,
    hodlr_rank,
    invert,
    matvec,
    multiply,
    norms,
    serialize,
    solve,
)

__version__ = "0.1.0"
