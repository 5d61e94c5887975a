"""Data containers and design assembly for the spatial varying-coefficient model.

A :class:`Dataset` holds the response, the constant-coefficient covariates
``X``, the varying-coefficient covariates ``Zstar``, the smoothing variable
``U`` and a row-normalized spatial weight matrix ``W``.
:func:`assemble_design` turns it into the spatial lag ``D = W y`` and the
regression design ``[X, Pi, E]`` used by the IVQR estimator.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateDesignError,
    DimensionError,
    ParameterDomainError,
    UnusableInstrumentsError,
)
from .spline import SplineBasis, VaryingCoefBlock, build_pi

log = logging.getLogger(__name__)

INSTRUMENT_CHOICES = ("wx_wz", "wx", "x_z")

__all__ = [
    "AssembledDesign",
    "Dataset",
    "INSTRUMENT_CHOICES",
    "assemble_design",
    "build_instruments",
    "build_weight_matrix",
    "read_dataset",
    "read_weights",
    "row_normalize",
    "spatial_lag",
    "write_dataset",
    "write_weights",
]


def _as_matrix(a, n, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(n, -1) if a.size else np.zeros((n, 0))
    if a.ndim != 2 or a.shape[0] != n:
        raise DimensionError(f"{name} must have {n} rows, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Dataset:
    y: np.ndarray
    X: np.ndarray
    Zstar: np.ndarray
    U: np.ndarray
    W: np.ndarray
    x_names: tuple = ()
    z_names: tuple = ()

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        n = y.size
        X = _as_matrix(self.X, n, "X").copy()
        Z = _as_matrix(self.Zstar, n, "Zstar").copy()
        U = np.array(self.U, dtype=float).ravel()
        W = np.array(self.W, dtype=float)
        if U.size != n:
            raise DimensionError(f"U has {U.size} entries, expected {n}")
        if W.shape != (n, n):
            raise DimensionError(f"W must be {n}x{n}, got {W.shape}")
        for name, a in (("y", y), ("X", X), ("Zstar", Z), ("U", U), ("W", W)):
            if not np.all(np.isfinite(a)):
                raise DimensionError(f"{name} contains non-finite entries")
        if np.any(W):
            if np.any(np.diag(W) != 0):
                raise DimensionError("W must have a zero diagonal")
            if not np.allclose(W.sum(axis=1), 1.0, rtol=0, atol=1e-10):
                raise DimensionError("W rows must sum to one (use row_normalize)")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Zstar", Z)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "W", W)
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{j + 1}" for j in range(X.shape[1])))
        if not self.z_names:
            object.__setattr__(self, "z_names", tuple(f"z{j + 1}" for j in range(Z.shape[1])))
        for a in (y, X, Z, U, W):
            a.setflags(write=False)

    @property
    def n(self):
        return self.y.size

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.Zstar.shape[1]

    def replace(self, **changes):
        fields = dict(y=self.y, X=self.X, Zstar=self.Zstar, U=self.U, W=self.W,
                      x_names=self.x_names, z_names=self.z_names)
        fields.update(changes)
        return Dataset(**fields)


@dataclass(frozen=True)
class AssembledDesign:
    D: np.ndarray
    X_tilde: np.ndarray
    E: np.ndarray
    block_index: dict
    basis: SplineBasis | None
    pi: VaryingCoefBlock | None = None
    dropped_instruments: tuple = field(default=())

    @property
    def p(self):
        s = self.block_index["X"]
        return s.stop - s.start

    @property
    def q_kn(self):
        s = self.block_index["Pi"]
        return s.stop - s.start

    @property
    def m_E(self):
        s = self.block_index["E"]
        return s.stop - s.start

    def block(self, name):
        return self.X_tilde[:, self.block_index[name]]


def row_normalize(W):
    W = np.array(W, dtype=float)
    s = W.sum(axis=1, keepdims=True)
    if np.any(s == 0):
        raise DimensionError("cannot row-normalize a weight matrix with an all-zero row")
    return W / s


def build_weight_matrix(n, r):
    """Row-normalized weights built from ``r**|i-j|`` off the diagonal."""
    if n < 2:
        raise ParameterDomainError(f"need n >= 2, got {n}")
    if not (0.0 < r < 1.0):
        raise ParameterDomainError(f"r must lie in (0, 1), got {r!r}")
    idx = np.arange(n)
    W = float(r) ** np.abs(idx[:, None] - idx[None, :]).astype(float)
    np.fill_diagonal(W, 0.0)
    return W / W.sum(axis=1, keepdims=True)


def spatial_lag(W, y):
    W = np.asarray(W, dtype=float)
    y = np.asarray(y, dtype=float)
    if W.ndim != 2 or W.shape[1] != y.shape[0]:
        raise DimensionError(f"W {W.shape} and y {y.shape} do not conform")
    return W @ y


def _independent_columns(A, base=None, tol=1e-10):
    """Indices of columns of ``A`` not in the span of ``base`` and earlier kept columns."""
    n = A.shape[0]
    Q = np.zeros((n, 0))
    if base is not None and base.shape[1]:
        Qb, Rb = np.linalg.qr(base)
        keep_b = np.abs(np.diag(Rb)) > tol * max(np.abs(np.diag(Rb)).max(), 1e-300)
        Q = Qb[:, keep_b]
    keep = []
    for j in range(A.shape[1]):
        a = A[:, j]
        na = np.linalg.norm(a)
        if na == 0:
            continue
        r = a - Q @ (Q.T @ a)
        r = r - Q @ (Q.T @ r)
        nr = np.linalg.norm(r)
        if nr > tol * na:
            Q = np.column_stack([Q, r / nr])
            keep.append(j)
    return keep


def build_instruments(W, X, Zstar, kind="wx_wz", return_dropped=False):
    """Instrument matrix for the spatial lag.

    ``kind`` is ``"wx_wz"`` (``[WX, WZ*]``), ``"wx"`` or ``"x_z"``
    (``[X, Z*]``). Collinear columns are dropped with a warning.
    """
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    X = _as_matrix(X, n, "X")
    Z = _as_matrix(Zstar, n, "Zstar")
    if kind == "wx_wz":
        E = np.column_stack([W @ X, W @ Z])
    elif kind == "wx":
        E = W @ X
    elif kind == "x_z":
        E = np.column_stack([X, Z])
    else:
        raise ParameterDomainError(f"unknown instrument set {kind!r}; choose from {INSTRUMENT_CHOICES}")
    E = np.asarray(E, dtype=float).reshape(n, -1)
    keep = _independent_columns(E)
    dropped = tuple(j for j in range(E.shape[1]) if j not in keep)
    if not keep:
        raise UnusableInstrumentsError("instrument matrix has rank zero")
    if dropped:
        warnings.warn(f"dropping collinear instrument columns {dropped}", RuntimeWarning, stacklevel=2)
        log.info("instrument rank repair dropped columns %s", dropped)
    E = E[:, keep]
    return (E, dropped) if return_dropped else E


def assemble_design(dataset, basis, instruments="wx_wz", linear=None, varying=None):
    """Spatial lag and the design ``[X, Pi, E]``.

    ``linear`` / ``varying`` override the covariate blocks (used by the
    rank-score null models); by default they are ``dataset.X`` and
    ``dataset.Zstar``. Instrument columns already spanned by ``[X, Pi]``
    are dropped.
    """
    n = dataset.n
    Xl = dataset.X if linear is None else _as_matrix(linear, n, "linear block")
    Zv = dataset.Zstar if varying is None else _as_matrix(varying, n, "varying block")
    D = spatial_lag(dataset.W, dataset.y)
    if Zv.shape[1]:
        if basis is None:
            raise DimensionError("a spline basis is required when there are varying coefficients")
        pi = build_pi(Zv, dataset.U, basis)
    else:
        pi = VaryingCoefBlock(np.zeros((n, 0)), 0, basis.basis_dim if basis is not None else 0)
    base = np.column_stack([Xl, pi.pi_matrix])
    if base.shape[1]:
        sv = np.linalg.svd(base, compute_uv=False)
        if sv[-1] <= 1e-10 * sv[0]:
            block = "X" if Xl.shape[1] and np.linalg.matrix_rank(Xl) < Xl.shape[1] else "Pi"
            raise DegenerateDesignError(f"design block {block} is rank deficient")
    E_raw, dropped_e = build_instruments(dataset.W, dataset.X, dataset.Zstar, instruments, return_dropped=True)
    keep = _independent_columns(E_raw, base)
    if not keep:
        raise UnusableInstrumentsError("every instrument column lies in the span of [X, Pi]")
    if len(keep) < E_raw.shape[1]:
        warnings.warn(
            f"dropping instrument columns {[j for j in range(E_raw.shape[1]) if j not in keep]} "
            "spanned by the regressors",
            RuntimeWarning,
            stacklevel=2,
        )
    E = E_raw[:, keep]
    X_tilde = np.column_stack([base, E])
    p, qk, mE = Xl.shape[1], pi.pi_matrix.shape[1], E.shape[1]
    block_index = {"X": slice(0, p), "Pi": slice(p, p + qk), "E": slice(p + qk, p + qk + mE)}
    sv = np.linalg.svd(X_tilde, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise DegenerateDesignError("assembled design [X, Pi, E] is rank deficient")
    return AssembledDesign(
        D=D,
        X_tilde=X_tilde,
        E=E,
        block_index=block_index,
        basis=basis,
        pi=pi,
        dropped_instruments=tuple(dropped_e) + tuple(j for j in range(E_raw.shape[1]) if j not in keep),
    )


# CSV interchange ----------------------------------------------------------


def read_dataset(path, weights_path, x_cols=None, z_cols=None):
    """Read a dataset CSV with columns ``y, x1.., z1.., u`` plus a weight file.

    ``x_cols`` / ``z_cols`` select covariates by header name; by default every
    column named ``x<k>`` / ``z<k>`` is used in numeric order.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DimensionError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DimensionError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DimensionError(f"{path}:{lineno}: {exc}") from None
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    col = {h: i for i, h in enumerate(header)}
    for required in ("y", "u"):
        if required not in col:
            raise DimensionError(f"{path}: missing required column '{required}'")

    def pick(prefix, names):
        if names is None:
            names = sorted((h for h in header if h.startswith(prefix) and h[1:].isdigit()),
                           key=lambda h: int(h[1:]))
        missing = [h for h in names if h not in col]
        if missing:
            raise DimensionError(f"{path}: missing column(s) {missing}")
        return list(names)

    xs = pick("x", x_cols)
    zs = pick("z", z_cols)
    n = data.shape[0]
    W = read_weights(weights_path, n)
    return Dataset(
        y=data[:, col["y"]],
        X=data[:, [col[h] for h in xs]] if xs else np.zeros((n, 0)),
        Zstar=data[:, [col[h] for h in zs]] if zs else np.zeros((n, 0)),
        U=data[:, col["u"]],
        W=W,
        x_names=tuple(xs),
        z_names=tuple(zs),
    )


def read_weights(path, n=None, normalize=True):
    """Read a dense ``n x n`` CSV or a triplet CSV ``i,j,w`` (0-based).

    A triplet file is recognised by a header ``i,j,w`` or by exactly three
    columns when ``n != 3``. Rows are normalized to sum to one unless
    ``normalize`` is false.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DimensionError(f"{path}: empty weight file")
    first = [c.strip().lower() for c in rows[0]]
    triplet = first == ["i", "j", "w"]
    body = rows[1:] if triplet or not _is_number(rows[0][0]) else rows
    if not triplet and len(body[0]) == 3 and (n is not None and n != 3):
        triplet = True
    try:
        vals = [[float(c) for c in r] for r in body]
    except ValueError as exc:
        raise DimensionError(f"{path}: {exc}") from None
    if triplet:
        if n is None:
            n = int(max(max(v[0], v[1]) for v in vals)) + 1
        W = np.zeros((n, n))
        for lineno, (i, j, w) in enumerate(vals, start=2 if body is not rows else 1):
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n):
                raise DimensionError(f"{path}:{lineno}: index ({i}, {j}) outside 0..{n - 1}")
            W[i, j] = w
    else:
        W = np.array(vals, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or (n is not None and W.shape[0] != n):
            raise DimensionError(f"{path}: expected a {n}x{n} matrix, got {W.shape}")
    if normalize and np.any(W):
        if np.any(np.diag(W) != 0):
            warnings.warn("zeroing the diagonal of the weight matrix", RuntimeWarning, stacklevel=2)
            np.fill_diagonal(W, 0.0)
        if not np.allclose(W.sum(axis=1), 1.0, atol=1e-10, rtol=0):
            log.info("row-normalizing weight matrix %s", path)
            W = row_normalize(W)
    return W


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_dataset(dataset, path):
    header = ["y"] + list(dataset.x_names) + list(dataset.z_names) + ["u"]
    data = np.column_stack([dataset.y, dataset.X, dataset.Zstar, dataset.U])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def write_weights(W, path, triplet=False):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if triplet:
            w.writerow(["i", "j", "w"])
            for i, j in zip(*np.nonzero(W)):
                w.writerow([i, j, repr(float(W[i, j]))])
        else:
            for row in W:
                w.writerow([repr(float(v)) for v in row])
