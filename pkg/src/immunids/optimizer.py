"""Data optimizer: covariance, Jacobi eigensolver and principal-component projection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ParseError, ValidationError

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100


def _as_matrix(data) -> np.ndarray:
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValidationError("data must be a 2-D matrix")
    if not np.all(np.isfinite(x)):
        raise ValidationError("data contains non-finite entries")
    return x


def covariance(data) -> np.ndarray:
    """Sample covariance (divisor N-1), exactly symmetric."""
    x = _as_matrix(data)
    if x.shape[0] < 2:
        raise ValidationError("covariance needs at least 2 records")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    upper = np.triu(cov)
    return upper + np.triu(cov, 1).T


def _fix_sign(v: np.ndarray) -> np.ndarray:
    mags = np.abs(v)
    top = mags.max()
    # near-equal magnitudes count as a tie so rounding noise cannot flip the sign
    k = int(np.flatnonzero(mags >= top * (1 - 1e-12))[0])
    return -v if v[k] < 0 else v


def eigen_decompose(m, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Eigenpairs of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``[(eigenvalue, eigenvector), ...]`` sorted by eigenvalue descending
    (ties keep diagonal order). Each eigenvector has unit norm and its
    largest-magnitude entry positive.
    """
    a = _as_matrix(m).copy()
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValidationError("matrix must be square")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-12:
        raise ValidationError("matrix is not symmetric")
    a = np.triu(a) + np.triu(a, 1).T
    v = np.eye(n)
    idx = np.arange(n)

    def off_max():
        if n < 2:
            return 0.0
        return float(np.max(np.abs(a[np.triu_indices(n, 1)])))

    for sweep in range(max_sweeps):
        if off_max() < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app, aqq = a[p, p], a[q, q]
                g = 100.0 * abs(apq)
                if sweep > 3 and abs(app) + g == abs(app) and abs(aqq) + g == abs(aqq):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (aqq - app) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rest = (idx != p) & (idx != q)
                arp = a[rest, p].copy()
                arq = a[rest, q].copy()
                a[rest, p] = a[p, rest] = c * arp - s * arq
                a[rest, q] = a[q, rest] = s * arp + c * arq
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        residual = off_max()
        if residual >= tol:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps", residual)

    values = np.diag(a).copy()
    order = sorted(range(n), key=lambda i: (-values[i], i))
    pairs = []
    for i in order:
        vec = v[:, i] / np.linalg.norm(v[:, i])
        pairs.append((float(values[i]), _fix_sign(vec)))
    return pairs


@dataclass
class ProjectionModel:
    mean: np.ndarray
    scale: np.ndarray
    eigenvalues: np.ndarray
    components: np.ndarray
    explained_variance_ratio: float

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def p(self) -> int:
        return self.components.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ProjectionModel):
            return NotImplemented
        return (np.array_equal(self.mean, other.mean) and np.array_equal(self.scale, other.scale)
                and np.array_equal(self.eigenvalues, other.eigenvalues)
                and np.array_equal(self.components, other.components)
                and self.explained_variance_ratio == other.explained_variance_ratio)

    def to_text(self) -> str:
        def row(xs):
            return " ".join(repr(float(x)) for x in xs)
        lines = ["projection v1",
                 f"n {self.n} p {self.p} ratio {self.explained_variance_ratio!r}",
                 "mean " + row(self.mean),
                 "scale " + row(self.scale)]
        for lam, vec in zip(self.eigenvalues, self.components):
            lines.append(f"eig {float(lam)!r} " + row(vec))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ProjectionModel":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        try:
            if lines[0] != "projection v1":
                raise ParseError("unsupported projection format " + repr(lines[0]), 1)
            head = lines[1].split()
            n, p, ratio = int(head[1]), int(head[3]), float(head[5])
            mean = np.array([float(x) for x in lines[2].split()[1:]])
            scale = np.array([float(x) for x in lines[3].split()[1:]])
            eig_lines = [ln.split()[1:] for ln in lines[4:4 + p]]
            eigenvalues = np.array([float(e[0]) for e in eig_lines])
            components = np.array([[float(x) for x in e[1:]] for e in eig_lines]).reshape(p, n)
        except (IndexError, ValueError) as exc:
            raise ParseError(f"bad projection model: {exc}") from None
        if mean.shape != (n,) or scale.shape != (n,) or eigenvalues.shape != (p,):
            raise ParseError("projection model dimensions do not match header")
        return cls(mean, scale, eigenvalues, components, ratio)


def choose_p(eigenvalues, variance_target: float) -> int:
    """Smallest p whose leading eigenvalues reach ``variance_target`` of the total."""
    values = np.asarray(eigenvalues, dtype=float)
    total = values.sum()
    if total <= 0:
        return 1
    acc = 0.0
    for k, lam in enumerate(values, start=1):
        acc += lam
        if acc / total >= variance_target:
            return k
    return len(values)


def fit_projection(data, p: int | None = None, variance_target: float = 0.95,
                   standardize: bool = False) -> ProjectionModel:
    """Fit the top-``p`` principal directions (``p=None`` picks it from ``variance_target``)."""
    x = _as_matrix(data)
    n_rows, n = x.shape
    if n_rows < 2:
        raise ValidationError("fit_projection needs at least 2 records")
    if p is not None and not 1 <= p <= n:
        raise ValidationError(f"p must be in 1..{n}, got {p}")
    mean = x.mean(axis=0)
    scale = np.ones(n)
    if standardize:
        std = x.std(axis=0, ddof=1)
        scale = np.where(std > 0, std, 1.0)
    pairs = eigen_decompose(covariance((x - mean) / scale))
    values = np.array([max(lam, 0.0) for lam, _ in pairs])
    if p is None:
        p = choose_p(values, variance_target)
    total = values.sum()
    ratio = 1.0 if total == 0 else float(values[:p].sum() / total)
    components = np.array([vec for _, vec in pairs[:p]])
    return ProjectionModel(mean, scale, values[:p].copy(), components, min(ratio, 1.0))


def project(model: ProjectionModel, record_features) -> np.ndarray:
    x = np.asarray(record_features, dtype=float)
    if x.shape != (model.n,):
        raise ValidationError(f"expected a vector of length {model.n}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("record features contain non-finite values")
    return model.components @ ((x - model.mean) / model.scale)


def project_matrix(model: ProjectionModel, data) -> np.ndarray:
    x = _as_matrix(data)
    if x.shape[1] != model.n:
        raise ValidationError(f"expected {model.n} columns, got {x.shape[1]}")
    return ((x - model.mean) / model.scale) @ model.components.T
