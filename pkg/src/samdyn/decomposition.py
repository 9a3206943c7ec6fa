"""Signal/noise decomposition of the weight drift, tracked two ways.

Every gradient update moves a filter inside span{mu, xi_1, ..., xi_n}, so
the drift from initialization has a unique expansion

    w_{j,r} - w0_{j,r} = j * gamma_{j,r} * mu/||mu||^2
                         + (1/(P-1)) sum_i rho_{j,r,i} * xi_i/||xi_i||^2,

with rho split by sign into zeta = rho * 1(rho >= 0) (noise aligned with
the filter's own class) and omega = rho * 1(rho <= 0).  Two independent
routes to the coefficients are provided and cross-checked:

- an incremental tracker that replays each optimizer step's exact loss
  derivatives and activation indicators in coefficient space, and
- a least-squares oracle that solves the (n+1)-dimensional Gram system for
  the drift of each filter.

The update rules make the sign split structural: for y_i = j every rho
increment is >= 0 (zeta never decreases), for y_i = -j every increment is
<= 0 (omega never increases), and the complementary entries stay zero.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import Dataset, stack
from .network import J_SIGNS


class InvariantViolation(AssertionError):
    """A structural coefficient invariant failed (hard error)."""


class DegenerateBasisError(ValueError):
    """The {mu, xi_i} system is numerically dependent."""


@dataclass
class Coeffs:
    gamma: np.ndarray  # (2, m)
    zeta: np.ndarray   # (2, m, n), >= 0, zero unless y_i == j
    omega: np.ndarray  # (2, m, n), <= 0, zero unless y_i == -j

    @classmethod
    def zeros(cls, m: int, n: int) -> "Coeffs":
        return cls(
            gamma=np.zeros((2, m)),
            zeta=np.zeros((2, m, n)),
            omega=np.zeros((2, m, n)),
        )

    @property
    def rho(self) -> np.ndarray:
        return self.zeta + self.omega

    def copy(self) -> "Coeffs":
        return Coeffs(self.gamma.copy(), self.zeta.copy(), self.omega.copy())

    def check_patterns(self, y: np.ndarray) -> None:
        """Hard-assert the sign and label-pattern invariants."""
        if np.any(self.zeta < 0):
            raise InvariantViolation("zeta has a negative entry")
        if np.any(self.omega > 0):
            raise InvariantViolation("omega has a positive entry")
        for row, j in enumerate(J_SIGNS):
            mismatched = y != j
            if np.any(self.zeta[row][:, mismatched] != 0):
                raise InvariantViolation(f"zeta nonzero for y_i != {int(j)} in row {row}")
            if np.any(self.omega[row][:, ~mismatched] != 0):
                raise InvariantViolation(f"omega nonzero for y_i == {int(j)} in row {row}")


def track_step(
    coeffs: Coeffs,
    *,
    batch: np.ndarray,
    ell: np.ndarray,
    sig_act: np.ndarray,
    noise_act: np.ndarray,
    y: np.ndarray,
    y_hat: np.ndarray,
    eta: float,
    B: int,
    m: int,
    P: int,
    mu_norm_sq: float,
    xi_norm_sq: np.ndarray,
) -> Coeffs:
    """Advance the coefficients by one batch step.

    ell, sig_act (2,m,B) and noise_act (2,m,B) must be exactly the loss
    derivatives and activation indicators the optimizer step used; the
    gamma increment is -(eta ||mu||^2/(Bm)) sum_i ell_i sig_act y_i y_hat_i
    (clean samples push, flipped samples pull), and each in-batch sample
    adds -(eta (P-1)^2/(Bm)) ell_i noise_act ||xi_i||^2 to its own zeta
    (y_i = j row) or the negation to omega (y_i = -j row).
    """
    B_batch = len(batch)
    if ell.shape != (B_batch,) or sig_act.shape[-1] != B_batch:
        raise ValueError("ell/activation shapes do not match the batch")
    yb = y[batch]
    gy = ell * yb * y_hat[batch]
    gamma = coeffs.gamma - (eta * mu_norm_sq / (B * m)) * np.einsum(
        "jmb,b->jm", sig_act, gy
    )

    coef = -(eta * (P - 1) ** 2 / (B * m)) * ell * xi_norm_sq[batch]  # (B,) >= 0
    contrib = noise_act * coef[None, None, :]  # (2, m, B)
    zeta = coeffs.zeta.copy()
    omega = coeffs.omega.copy()
    for row, j in enumerate(J_SIGNS):
        own = yb == j
        np.add.at(zeta[row].T, batch[own], contrib[row][:, own].T)
        np.subtract.at(omega[row].T, batch[~own], contrib[row][:, ~own].T)
    return Coeffs(gamma=gamma, zeta=zeta, omega=omega)


def track_step_sgd(coeffs, batch, ell, activations, **kw) -> Coeffs:
    """SGD coefficient step; activations = (sig_act, noise_act) at the
    unperturbed weights."""
    sig_act, noise_act = activations
    return track_step(coeffs, batch=batch, ell=ell, sig_act=sig_act, noise_act=noise_act, **kw)


def track_step_sam(coeffs, batch, ell, perturbed_activations, **kw) -> Coeffs:
    """SAM coefficient step; same algebra driven by the perturbed-weight
    indicators (and the loss derivatives the perturbed gradient used)."""
    sig_act, noise_act = perturbed_activations
    return track_step(coeffs, batch=batch, ell=ell, sig_act=sig_act, noise_act=noise_act, **kw)


@dataclass
class Basis:
    mu: np.ndarray        # (d,)
    xis: np.ndarray       # (n, d)
    gram: np.ndarray      # (n+1, n+1)
    P: int
    mu_norm_sq: float
    xi_norm_sq: np.ndarray
    cond: float
    _cho: tuple

    @property
    def vectors(self) -> np.ndarray:
        return np.vstack([self.mu[None, :], self.xis])


def _name_basis_vector(k: int) -> str:
    return "mu" if k == 0 else f"xi_{k - 1}"


def make_basis(mu: np.ndarray, xis: np.ndarray, P: int, cond_limit: float = 1e12) -> Basis:
    """Gram matrix of {mu, xi_1..xi_n} with a conditioning guard.

    Raises DegenerateBasisError naming the most collinear pair when the
    condition number exceeds cond_limit (duplicated xi, zero mu, n >= d).
    """
    V = np.vstack([np.asarray(mu, dtype=np.float64)[None, :], np.asarray(xis, dtype=np.float64)])
    gram = V @ V.T
    diag = np.diag(gram)
    cond = float(np.linalg.cond(gram)) if np.all(np.isfinite(gram)) else np.inf
    if not np.isfinite(cond) or cond > cond_limit:
        zero = np.flatnonzero(diag == 0)
        if zero.size:
            raise DegenerateBasisError(
                f"basis vector {_name_basis_vector(int(zero[0]))} has zero norm"
            )
        corr = gram / np.sqrt(np.outer(diag, diag))
        np.fill_diagonal(corr, 0.0)
        a, b = np.unravel_index(np.argmax(np.abs(corr)), corr.shape)
        raise DegenerateBasisError(
            f"Gram condition number {cond:.3e} exceeds {cond_limit:.1e}; "
            f"nearest dependence between {_name_basis_vector(int(a))} and "
            f"{_name_basis_vector(int(b))} (|cos| = {abs(corr[a, b]):.6f})"
        )
    return Basis(
        mu=V[0],
        xis=V[1:],
        gram=gram,
        P=P,
        mu_norm_sq=float(diag[0]),
        xi_norm_sq=diag[1:].copy(),
        cond=cond,
        _cho=cho_factor(gram),
    )


def basis_from_dataset(ds: Dataset, cond_limit: float = 1e12) -> Basis:
    arrays = stack(ds)
    return make_basis(arrays.mu, arrays.xi, ds.params.P, cond_limit)


@dataclass
class OracleCoeffs:
    gamma: np.ndarray  # (2, m)
    rho: np.ndarray    # (2, m, n)
    residual: float    # ||drift - projection||_F / ||drift||_F


def oracle_solve(w: np.ndarray, w0: np.ndarray, basis: Basis) -> OracleCoeffs:
    """Least-squares read-off of the decomposition coefficients.

    Solves the Gram normal equations for each filter's drift and converts
    basis weights to coefficients: the mu weight times j ||mu||^2 gives
    gamma, the xi_i weight times (P-1) ||xi_i||^2 gives rho_i.  One
    factorization is shared across all 2m filters.
    """
    if w.shape != w0.shape:
        raise ValueError(f"weight shapes differ: {w.shape} vs {w0.shape}")
    two, m, d = w.shape
    V = basis.vectors
    drift = (w - w0).reshape(2 * m, d)
    rhs = drift @ V.T
    c = cho_solve(basis._cho, rhs.T).T  # (2m, n+1)
    recon = c @ V
    drift_norm = float(np.linalg.norm(drift))
    residual = 0.0 if drift_norm == 0 else float(np.linalg.norm(drift - recon)) / drift_norm
    gamma = (c[:, 0] * basis.mu_norm_sq).reshape(2, m) * J_SIGNS[:, None]
    rho = (c[:, 1:] * (basis.P - 1) * basis.xi_norm_sq[None, :]).reshape(2, m, -1)
    return OracleCoeffs(gamma=gamma, rho=rho, residual=residual)


def reconstruct(coeffs: Coeffs, basis: Basis, w0: np.ndarray) -> np.ndarray:
    """Rebuild weights from coefficients: the inverse of the read-off."""
    rho = coeffs.rho
    w = w0 + np.einsum(
        "jmn,nd->jmd", rho / basis.xi_norm_sq[None, None, :], basis.xis
    ) / (basis.P - 1)
    if basis.mu_norm_sq == 0:
        if np.any(coeffs.gamma != 0):
            raise DegenerateBasisError("nonzero gamma with zero-norm mu")
        return w
    gdir = (J_SIGNS[:, None] * coeffs.gamma / basis.mu_norm_sq)[:, :, None]
    return w + gdir * basis.mu[None, None, :]


@dataclass
class CoeffState:
    t: int
    b: int
    step: int  # state index: number of batch steps applied
    coeffs: Coeffs


class CoeffTracker:
    """Training hook that maintains the tracked coefficients.

    Consumes StepEvents, applies the coefficient recurrence with the exact
    per-step quantities, hard-asserts the sign/zero patterns after every
    step, and (optionally) keeps the full coefficient history, one entry
    per trajectory state.
    """

    def __init__(self, ds: Dataset, m: int, keep_history: bool = True, check: bool = True):
        arrays = stack(ds)
        self.y = arrays.y
        self.y_hat = arrays.y_hat
        self.mu_norm_sq = float(arrays.mu @ arrays.mu)
        self.xi_norm_sq = np.einsum("nd,nd->n", arrays.xi, arrays.xi)
        self.P = ds.params.P
        self.m = m
        self.n = ds.n
        self.check = check
        self.coeffs = Coeffs.zeros(m, self.n)
        self.history: list[CoeffState] = []
        if keep_history:
            self.history.append(CoeffState(0, 0, 0, self.coeffs.copy()))
        self._keep = keep_history

    def __call__(self, event) -> None:
        B = len(event.batch)
        self.coeffs = track_step(
            self.coeffs,
            batch=event.batch,
            ell=event.ell,
            sig_act=event.sig_act,
            noise_act=event.noise_act,
            y=self.y,
            y_hat=self.y_hat,
            eta=event.eta,
            B=B,
            m=self.m,
            P=self.P,
            mu_norm_sq=self.mu_norm_sq,
            xi_norm_sq=self.xi_norm_sq,
        )
        if self.check:
            self.coeffs.check_patterns(self.y)
        if self._keep:
            H = self.n // B
            t, b = (event.t + 1, 0) if event.b + 1 == H else (event.t, event.b + 1)
            self.history.append(CoeffState(t, b, event.step + 1, self.coeffs.copy()))

    def state_at(self, t: int, b: int) -> CoeffState:
        for st in self.history:
            if st.t == t and st.b == b:
                return st
        raise KeyError(f"no tracked coefficients at state ({t}, {b})")


def write_coeff_csv(path, history: list[CoeffState]) -> None:
    """Coefficient time series: (t, b, j, r, gamma, sum_zeta, min_omega, max_zeta)."""
    with open(path, "w") as fh:
        fh.write("t,b,j,r,gamma,sum_zeta,min_omega,max_zeta\n")
        for st in history:
            for row, j in enumerate((1, -1)):
                for r in range(st.coeffs.gamma.shape[1]):
                    zrow = st.coeffs.zeta[row, r]
                    orow = st.coeffs.omega[row, r]
                    fh.write(
                        f"{st.t},{st.b},{j},{r},{st.coeffs.gamma[row, r]!r},"
                        f"{float(zrow.sum())!r},{float(orow.min())!r},{float(zrow.max())!r}\n"
                    )
