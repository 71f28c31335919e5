"""Leroux CAR spatiotemporal model with AR(1) dynamics.

Generative model for m locations and T visits::

    x_t  = beta + phi_t + eps_t,        eps_t ~ N(0, eta2 I)
    phi_1 ~ N(0, tau2 Q^-1)
    phi_t | phi_{t-1} ~ N(psi phi_{t-1}, tau2 Q^-1)
    Q(W, rho) = rho (diag(W 1) - W) + (1 - rho) I

Priors: eta2, tau2 ~ IG(1, 0.1); rho, psi ~ U(0, 1); beta ~ N(0, 1000).

The sampler works in the eigenbasis of the graph Laplacian L = diag(W 1) - W,
where Q is diagonal with entries rho * lambda_k + 1 - rho. For a connected
graph the constant vector spans the lambda = 0 mode, so beta only touches
that mode and is drawn jointly with it.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.csgraph import connected_components
from scipy.special import log_ndtr, ndtr, ndtri, ndtri_exp

IG_SHAPE = 1.0
IG_SCALE = 0.1
BETA_PRIOR_VAR = 1000.0


class CarError(ValueError):
    pass


# ---------------------------------------------------------------------------
# graph


def build_adjacency(mask: np.ndarray) -> np.ndarray:
    """Queen (edge or corner) adjacency among the informative cells of a mask."""
    mask = np.asarray(mask, dtype=bool)
    coords = np.argwhere(mask)
    m = coords.shape[0]
    if m < 2:
        raise CarError(f"adjacency needs at least 2 informative cells, got {m}")
    diff = np.abs(coords[:, None, :] - coords[None, :, :])
    w = ((diff.max(axis=2) == 1)).astype(np.float64)
    n_comp, labels = connected_components(sparse.csr_matrix(w), directed=False)
    if n_comp > 1:
        parts = [coords[labels == c].tolist() for c in range(n_comp)]
        raise CarError(f"mask is disconnected under queen adjacency; components (row, col): {parts}")
    return w


def _check_w(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise CarError(f"adjacency must be square, got {w.shape}")
    if not np.array_equal(w, w.T) or np.any(np.diag(w) != 0) or not np.all((w == 0) | (w == 1)):
        raise CarError("adjacency must be symmetric, binary, with zero diagonal")
    if np.any(w.sum(axis=1) == 0):
        raise CarError("every location needs at least one neighbour")
    return w


def leroux_precision(w: np.ndarray, rho: float) -> np.ndarray:
    if not 0.0 <= rho < 1.0:
        raise CarError(f"rho must lie in [0, 1), got {rho}")
    w = _check_w(w)
    lap = np.diag(w.sum(axis=1)) - w
    return rho * lap + (1.0 - rho) * np.eye(w.shape[0])


def log_det_precision(eigenvalues: np.ndarray, rho: float) -> float:
    """log det Q(W, rho) from the Laplacian eigenvalues."""
    q = rho * np.asarray(eigenvalues) + 1.0 - rho
    if np.any(q <= 0):
        raise CarError(f"precision is not positive definite at rho={rho}")
    return float(np.sum(np.log(q)))


@dataclass(frozen=True)
class SpatialGraph:
    """Adjacency plus its cached Laplacian eigendecomposition."""

    w: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @classmethod
    def from_adjacency(cls, w: np.ndarray) -> "SpatialGraph":
        w = _check_w(w)
        lap = np.diag(w.sum(axis=1)) - w
        lam, u = np.linalg.eigh(lap)
        lam = np.clip(lam, 0.0, None)
        n_comp, _ = connected_components(sparse.csr_matrix(w), directed=False)
        if n_comp > 1:
            raise CarError("adjacency graph is disconnected")
        # pin the null mode to the exact constant vector
        m = w.shape[0]
        lam[0] = 0.0
        u = u.copy()
        u[:, 0] = 1.0 / math.sqrt(m)
        return cls(w, lam, u)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "SpatialGraph":
        return cls.from_adjacency(build_adjacency(mask))

    @property
    def m(self) -> int:
        return self.w.shape[0]

    def q_diag(self, rho: float) -> np.ndarray:
        return rho * self.eigenvalues + 1.0 - rho


def _as_graph(g) -> SpatialGraph:
    return g if isinstance(g, SpatialGraph) else SpatialGraph.from_adjacency(g)


# ---------------------------------------------------------------------------
# parameters and simulation


@dataclass(frozen=True)
class CarParams:
    beta: float
    tau2: float
    eta2: float
    rho: float
    psi: float

    def __post_init__(self):
        if not (self.tau2 > 0 and self.eta2 > 0):
            raise CarError(f"variances must be positive (tau2={self.tau2}, eta2={self.eta2})")
        if not (0 < self.rho < 1 and 0 <= self.psi < 1):
            raise CarError(f"rho and psi must lie in (0, 1) (rho={self.rho}, psi={self.psi})")

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("beta", "tau2", "eta2", "rho", "psi")}


@dataclass
class CarSimulation:
    x: np.ndarray  # (T, m) observations
    phi: np.ndarray  # (T, m) latent spatial process


def simulate_car_st(params: CarParams, w, n_visits: int, seed=None) -> CarSimulation:
    """Forward-simulate the AR(1) Leroux-CAR process; deterministic given ``seed``.

    Innovations are drawn through the Cholesky factor of Q, so degenerate
    variance limits (tau2, eta2 -> 0) reduce x to beta exactly.
    """
    if n_visits < 1:
        raise CarError("need at least one visit")
    w = _check_w(w.w if isinstance(w, SpatialGraph) else w)
    q = leroux_precision(w, params.rho)
    try:
        chol = linalg.cholesky(q, lower=True)
    except linalg.LinAlgError as exc:
        raise CarError(f"Cholesky of Q failed at rho={params.rho}: {exc}") from None
    rng = np.random.default_rng(seed)
    m = w.shape[0]
    z = rng.standard_normal((n_visits, m))
    # L^T a = z gives a ~ N(0, Q^-1)
    innov = linalg.solve_triangular(chol.T, z.T, lower=False).T * math.sqrt(params.tau2)
    phi = np.empty((n_visits, m))
    phi[0] = innov[0]
    for t in range(1, n_visits):
        phi[t] = params.psi * phi[t - 1] + innov[t]
    eps = rng.standard_normal((n_visits, m)) * math.sqrt(params.eta2)
    return CarSimulation(params.beta + phi + eps, phi)


# ---------------------------------------------------------------------------
# MCMC


@dataclass
class McmcConfig:
    iterations: int = 5000
    burn_in: int = 2000
    thin: int = 1
    rho_step: float = 1.0  # sd of the logit-scale random walk
    seed: int = 0
    adapt: bool = True
    target_acceptance: float = 0.4

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise CarError("burn-in must be non-negative and below the iteration count")
        if self.thin < 1:
            raise CarError("thinning must be >= 1")


@dataclass
class CarPosterior:
    beta: np.ndarray
    tau2: np.ndarray
    eta2: np.ndarray
    rho: np.ndarray
    psi: np.ndarray
    phi: np.ndarray  # (n, T, m)
    iterations: np.ndarray
    graph: SpatialGraph = field(repr=False)
    rho_acceptance: float = float("nan")
    rho_step: float = float("nan")
    fitted_mean: np.ndarray | None = None  # (T, m) posterior mean of beta + phi_t

    def __len__(self):
        return self.beta.shape[0]

    def param(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def interval(self, name: str, level: float = 0.95) -> tuple[float, float]:
        a = (1.0 - level) / 2.0
        lo, hi = np.quantile(self.param(name), [a, 1.0 - a])
        return float(lo), float(hi)

    def means(self) -> dict[str, float]:
        return {k: float(np.mean(self.param(k))) for k in ("beta", "tau2", "eta2", "rho", "psi")}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "beta", "tau2", "eta2", "rho", "psi"])
        for i in range(len(self)):
            writer.writerow(
                [int(self.iterations[i])]
                + [repr(float(v[i])) for v in (self.beta, self.tau2, self.eta2, self.rho, self.psi)]
            )
        return buf.getvalue()


def _ar_precision(psi: float, n: int) -> np.ndarray:
    """Precision of phi_1 ~ N(0, 1), phi_t | phi_{t-1} ~ N(psi phi_{t-1}, 1)."""
    a = np.zeros((n, n))
    idx = np.arange(n)
    a[idx, idx] = 1.0 + psi * psi
    a[n - 1, n - 1] = 1.0
    a[idx[:-1], idx[:-1] + 1] = -psi
    a[idx[:-1] + 1, idx[:-1]] = -psi
    return a


def truncated_normal(rng: np.random.Generator, mu: float, sd: float, lo: float, hi: float) -> float:
    """One draw from N(mu, sd^2) restricted to (lo, hi) by inverse CDF."""
    a, b = (lo - mu) / sd, (hi - mu) / sd
    flip = a > 0
    if flip:
        a, b = -b, -a
    v = rng.random()
    if b <= 0:
        # both limits in the lower tail: stay in log space
        la, lb = log_ndtr(a), log_ndtr(b)
        z = float(ndtri_exp(np.logaddexp(la + math.log1p(-v), lb + math.log(v) if v > 0 else -np.inf)))
    else:
        pa, pb = ndtr(a), ndtr(b)
        z = float(ndtri(pa + v * (pb - pa)))
    z = min(max(z, a), b)
    return mu + sd * (-z if flip else z)


def _inv_gamma(rng, shape, scale) -> float:
    return scale / rng.gamma(shape)


def _rho_log_target(rho, lam, s_k, tau2, n_visits):
    q = rho * lam + 1.0 - rho
    return 0.5 * n_visits * np.sum(np.log(q)) - 0.5 * np.dot(q, s_k) / tau2 + math.log(rho) + math.log1p(-rho)


def gibbs_fit(x: np.ndarray, graph, config: McmcConfig | None = None) -> CarPosterior:
    """Fit the CAR-AR model to one (T, m) series by Metropolis-within-Gibbs.

    Per sweep: (beta, constant mode of phi) jointly; each remaining spectral
    mode of phi_{1:T} jointly over time; eta2 and tau2 from their
    inverse-gamma conditionals; psi from its normal conditional truncated to
    (0, 1); rho by a logit-scale random walk whose step adapts during burn-in
    towards the target acceptance rate and is frozen afterwards.
    """
    cfg = config or McmcConfig()
    graph = _as_graph(graph)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != graph.m:
        raise CarError(f"series must be (T, {graph.m}), got {x.shape}")
    n_t, m = x.shape
    if n_t < 2:
        raise CarError("the AR coefficient is unidentifiable with fewer than 2 visits")
    if not np.all(np.isfinite(x)):
        raise CarError("series contains non-finite values")

    rng = np.random.default_rng(cfg.seed)
    lam, u = graph.eigenvalues, graph.eigenvectors
    sqrt_m = math.sqrt(m)
    y = x @ u  # (T, m) spectral data; column 0 carries sqrt(m) * beta

    beta = float(x.mean())
    resid_var = float(np.var(x)) or 1.0
    eta2, tau2, rho, psi = resid_var / 2, resid_var / 2, 0.5, 0.5
    ph = y.copy()
    ph[:, 0] -= sqrt_m * beta

    log_step = math.log(cfg.rho_step)
    n_keep = (cfg.iterations - cfg.burn_in + cfg.thin - 1) // cfg.thin
    out = {k: np.empty(n_keep) for k in ("beta", "tau2", "eta2", "rho", "psi")}
    phi_out = np.empty((n_keep, n_t, m))
    iters = np.empty(n_keep, dtype=np.int64)
    accepted = window_acc = 0
    kept = 0
    ones_t = np.ones(n_t)

    for it in range(cfg.iterations):
        q = rho * lam + 1.0 - rho
        a_mat = _ar_precision(psi, n_t)
        a_val, a_vec = np.linalg.eigh(a_mat)

        # non-constant modes: P_k = (q_k / tau2) A + I / eta2, diagonal in A's eigenbasis
        d = q[1:, None] * a_val[None, :] / tau2 + 1.0 / eta2  # (m-1, T)
        rhs = (a_vec.T @ y[:, 1:]).T / eta2  # (m-1, T)
        draw = rhs / d + rng.standard_normal(d.shape) / np.sqrt(d)
        ph[:, 1:] = a_vec @ draw.T

        # constant mode jointly with beta
        p0 = np.zeros((n_t + 1, n_t + 1))
        p0[:n_t, :n_t] = q[0] / tau2 * a_mat + np.eye(n_t) / eta2
        p0[:n_t, n_t] = p0[n_t, :n_t] = sqrt_m / eta2
        p0[n_t, n_t] = m * n_t / eta2 + 1.0 / BETA_PRIOR_VAR
        b0 = np.concatenate([y[:, 0] / eta2, [sqrt_m * y[:, 0].sum() / eta2]])
        c0 = linalg.cholesky(p0, lower=True)
        mean0 = linalg.cho_solve((c0, True), b0)
        joint = mean0 + linalg.solve_triangular(c0.T, rng.standard_normal(n_t + 1), lower=False)
        ph[:, 0] = joint[:n_t]
        beta = float(joint[n_t])

        # variances
        resid = y - ph
        resid[:, 0] -= sqrt_m * beta
        sse = float(np.sum(resid * resid))
        eta2 = _inv_gamma(rng, IG_SHAPE + 0.5 * m * n_t, IG_SCALE + 0.5 * sse)
        innov = ph.copy()
        innov[1:] -= psi * ph[:-1]
        s_k = np.sum(innov * innov, axis=0)
        tau2 = _inv_gamma(rng, IG_SHAPE + 0.5 * m * n_t, IG_SCALE + 0.5 * float(np.dot(q, s_k)))

        # psi: normal conditional truncated to (0, 1)
        prev, curr = ph[:-1], ph[1:]
        prec = float(np.sum(q * np.sum(prev * prev, axis=0))) / tau2
        lin = float(np.sum(q * np.sum(prev * curr, axis=0))) / tau2
        mu, sd = lin / prec, 1.0 / math.sqrt(prec)
        psi = truncated_normal(rng, mu, sd, 0.0, 1.0)
        psi = min(max(psi, 1e-12), 1.0 - 1e-12)

        # rho: random walk on logit scale
        innov = ph.copy()
        innov[1:] -= psi * ph[:-1]
        s_k = np.sum(innov * innov, axis=0)
        cur = _rho_log_target(rho, lam, s_k, tau2, n_t)
        prop_logit = math.log(rho / (1.0 - rho)) + math.exp(log_step) * rng.standard_normal()
        prop = 1.0 / (1.0 + math.exp(-prop_logit))
        ok = False
        if 0.0 < prop < 1.0:
            new = _rho_log_target(prop, lam, s_k, tau2, n_t)
            ok = math.log(1.0 - rng.random()) < new - cur
        if ok:
            rho = prop
        if it < cfg.burn_in:
            window_acc += ok
            if cfg.adapt and (it + 1) % 50 == 0:
                log_step += (window_acc / 50.0 - cfg.target_acceptance) * 2.0
                window_acc = 0
        else:
            accepted += ok
            if (it - cfg.burn_in) % cfg.thin == 0:
                out["beta"][kept], out["tau2"][kept], out["eta2"][kept] = beta, tau2, eta2
                out["rho"][kept], out["psi"][kept] = rho, psi
                phi_out[kept] = ph @ u.T
                iters[kept] = it
                kept += 1

    n_post = cfg.iterations - cfg.burn_in
    fitted = out["beta"][:, None, None] * ones_t[None, :, None] + phi_out
    return CarPosterior(
        **out,
        phi=phi_out,
        iterations=iters,
        graph=graph,
        rho_acceptance=accepted / n_post,
        rho_step=math.exp(log_step),
        fitted_mean=fitted.mean(axis=0),
    )


# ---------------------------------------------------------------------------
# forecasting


@dataclass
class StForecast:
    horizons: np.ndarray
    mean: np.ndarray  # (H, m)
    lower: np.ndarray  # (H, m) 5% quantile
    upper: np.ndarray  # (H, m) 95% quantile


def forecast_st(posterior: CarPosterior, horizons, seed=None) -> StForecast:
    """Posterior predictive for visits T + h.

    The point forecast averages the conditional means beta + psi^h phi_T over
    retained samples; the 90% band comes from simulating the AR recursion and
    observation noise once per retained sample. h = 0 gives the fitted last
    visit (no observation noise).
    """
    hs = np.atleast_1d(np.asarray(horizons, dtype=int))
    if len(posterior) == 0:
        raise CarError("empty posterior")
    if np.any(hs < 0):
        raise CarError("horizons must be >= 0")
    rng = np.random.default_rng(seed)
    g = posterior.graph
    n, m = len(posterior), g.m
    beta, psi = posterior.beta[:, None], posterior.psi[:, None]
    tau, eta = np.sqrt(posterior.tau2)[:, None], np.sqrt(posterior.eta2)[:, None]
    phi_last = posterior.phi[:, -1, :]

    means, lows, highs = [], [], []
    phi = phi_last.copy()
    for h in range(int(hs.max()) + 1):
        if h > 0:
            q = posterior.rho[:, None] * g.eigenvalues[None, :] + 1.0 - posterior.rho[:, None]
            innov = (rng.standard_normal((n, m)) * tau / np.sqrt(q)) @ g.eigenvectors.T
            phi = psi * phi + innov
        if h in hs:
            cond_mean = beta + psi**h * phi_last
            draws = beta + phi
            if h > 0:
                draws = draws + rng.standard_normal((n, m)) * eta
            means.append(cond_mean.mean(axis=0))
            lo, hi = np.quantile(draws, [0.05, 0.95], axis=0)
            lows.append(lo)
            highs.append(hi)
    order = {h: i for i, h in enumerate(sorted(set(hs.tolist())))}
    pick = [order[h] for h in hs.tolist()]
    return StForecast(hs, np.array(means)[pick], np.array(lows)[pick], np.array(highs)[pick])


def st_residual_se(posterior: CarPosterior, x: np.ndarray) -> float:
    """Residual SE of posterior-mean fitted values with zero degrees of freedom."""
    r = np.asarray(x) - posterior.fitted_mean
    return float(math.sqrt(np.sum(r * r) / r.size))
