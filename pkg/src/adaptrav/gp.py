"""Gaussian-process q-value models with ARD kernels.

One model per flipper configuration, trained by maximizing the log marginal
likelihood over log hyperparameters with gradient ascent (backtracking line
search, seeded restarts).  Three prediction paths:

* ``predict``            exact posterior at a fully observed input,
* ``predict_uncertain``  exact first/second moments under Gaussian input
                         uncertainty (squared-exponential kernel only),
* ``gibbs_marginalize``  completes missing elevation bins by Gibbs sampling
                         under a grid smoothness prior and collapses the
                         resulting predictive mixture.

Hyperparameter vector layout: [log sv, log l_1 .. log l_n, log noise]
with log rq_alpha appended for the rational-quadratic kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .dem import Grid, StateVector

JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
DEFAULT_RESTARTS = 5
DEFAULT_MAX_ITERS = 200
DEFAULT_TOL = 1e-6
DEFAULT_MAX_POINTS = 500


class TrainingError(RuntimeError):
    """Raised when the Gram matrix stays non positive definite."""


@dataclass(frozen=True)
class KernelParams:
    kind: str                    # "se" or "rq"
    signal_variance: float
    length_scales: np.ndarray
    noise_variance: float
    rq_alpha: float | None = None

    def __post_init__(self):
        if self.kind not in ("se", "rq"):
            raise ValueError("kernel kind must be 'se' or 'rq'")
        ls = np.asarray(self.length_scales, dtype=float)
        if ls.ndim != 1 or (ls <= 0).any():
            raise ValueError("length scales must be positive")
        if self.signal_variance <= 0 or self.noise_variance <= 0:
            raise ValueError("variances must be positive")
        if self.kind == "rq" and (self.rq_alpha is None or self.rq_alpha <= 0):
            raise ValueError("rq kernel needs rq_alpha > 0")
        ls = ls.copy(); ls.flags.writeable = False
        object.__setattr__(self, "length_scales", ls)


@dataclass(frozen=True)
class GaussPred:
    mean: float
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be nonnegative")


@dataclass(frozen=True)
class GaussMixture:
    """Equal-weight Gaussian mixture (uncollapsed Gibbs output)."""

    means: np.ndarray
    variances: np.ndarray

    def collapse(self) -> GaussPred:
        mean = float(np.mean(self.means))
        second = float(np.mean(self.variances + self.means ** 2))
        return GaussPred(mean, max(0.0, second - mean * mean))


def _scaled_sqdist(a: np.ndarray, b: np.ndarray, length_scales: np.ndarray) -> np.ndarray:
    sa = a / length_scales
    sb = b / length_scales
    aa = (sa * sa).sum(axis=1)[:, None]
    bb = (sb * sb).sum(axis=1)[None, :]
    d = aa + bb - 2.0 * (sa @ sb.T)
    return np.maximum(d, 0.0)


def kernel_gram(params: KernelParams, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = _scaled_sqdist(np.atleast_2d(a), np.atleast_2d(b), params.length_scales)
    if params.kind == "se":
        return params.signal_variance * np.exp(-0.5 * d)
    u = d / (2.0 * params.rq_alpha)
    return params.signal_variance * np.power(1.0 + u, -params.rq_alpha)


def kernel_eval(params: KernelParams, a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(kernel_gram(params, a[None, :], b[None, :])[0, 0])


def _theta_to_params(theta: np.ndarray, kind: str, n: int) -> KernelParams:
    sv = math.exp(theta[0])
    ls = np.exp(theta[1:1 + n])
    noise = math.exp(theta[1 + n])
    alpha = math.exp(theta[2 + n]) if kind == "rq" else None
    return KernelParams(kind, sv, ls, noise, alpha)


def _params_to_theta(p: KernelParams) -> np.ndarray:
    theta = [math.log(p.signal_variance)]
    theta += list(np.log(p.length_scales))
    theta.append(math.log(p.noise_variance))
    if p.kind == "rq":
        theta.append(math.log(p.rq_alpha))
    return np.array(theta)


def _chol_with_jitter(K: np.ndarray):
    for jitter in JITTERS:
        try:
            return cholesky(K + jitter * np.eye(K.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise TrainingError("Gram matrix is not positive definite at max jitter")


def log_marginal_likelihood(theta: np.ndarray, X: np.ndarray, q: np.ndarray,
                            kind: str, eval_gradient: bool = False):
    """Log marginal likelihood of the data, optionally with its gradient
    with respect to the log hyperparameters."""
    m, n = X.shape
    if not np.isfinite(theta).all() or np.abs(theta).max() > 30.0:
        # hopeless corner of log-parameter space; reject the step
        if eval_gradient:
            return -np.inf, np.zeros_like(theta)
        return -np.inf
    params = _theta_to_params(theta, kind, n)
    d = _scaled_sqdist(X, X, params.length_scales)
    if kind == "se":
        Kf = params.signal_variance * np.exp(-0.5 * d)
    else:
        base = 1.0 + d / (2.0 * params.rq_alpha)
        Kf = params.signal_variance * np.power(base, -params.rq_alpha)
    K = Kf + params.noise_variance * np.eye(m)
    try:
        L = cholesky(K, lower=True)
    except np.linalg.LinAlgError:
        if eval_gradient:
            return -np.inf, np.zeros_like(theta)
        return -np.inf
    alpha = cho_solve((L, True), q)
    lml = (-0.5 * float(q @ alpha)
           - float(np.log(np.diag(L)).sum())
           - 0.5 * m * math.log(2.0 * math.pi))
    if not eval_gradient:
        return lml

    Kinv = cho_solve((L, True), np.eye(m))
    W = np.outer(alpha, alpha) - Kinv       # dL/dK = W/2

    grad = np.zeros_like(theta)
    grad[0] = 0.5 * float((W * Kf).sum())   # d/d log sv
    if kind == "se":
        WS = W * Kf
    else:
        WS = W * (params.signal_variance * np.power(base, -params.rq_alpha - 1.0))
    for dim in range(n):
        col = X[:, dim] / params.length_scales[dim]
        Dd = (col[:, None] - col[None, :]) ** 2
        grad[1 + dim] = 0.5 * float((WS * Dd).sum())
    grad[1 + n] = 0.5 * params.noise_variance * float(np.trace(W))
    if kind == "rq":
        u = d / (2.0 * params.rq_alpha)
        dK_dlog_alpha = params.rq_alpha * Kf * (u / (1.0 + u) - np.log1p(u))
        grad[2 + n] = 0.5 * float((W * dK_dlog_alpha).sum())
    return lml, grad


class GPModel:
    """Trained GP with a cached Cholesky factorization of K + noise*I."""

    def __init__(self, X: np.ndarray, q: np.ndarray, params: KernelParams,
                 log_likelihood: float | None = None):
        X = np.asarray(X, dtype=float)
        q = np.asarray(q, dtype=float)
        if X.ndim != 2 or q.shape != (X.shape[0],):
            raise ValueError("X must be (m, n) with q of length m")
        if params.length_scales.size != X.shape[1]:
            raise ValueError("length scales do not match input dimension")
        self.X = X
        self.q = q
        self.params = params
        K = kernel_gram(params, X, X) + params.noise_variance * np.eye(X.shape[0])
        self.L, self.jitter = _chol_with_jitter(K)
        self.alpha = cho_solve((self.L, True), q)
        self.log_likelihood = log_likelihood

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def _initial_theta(X: np.ndarray, q: np.ndarray, kind: str) -> np.ndarray:
    n = X.shape[1]
    spread = X.std(axis=0)
    varying = spread > 1e-8   # constant columns leave roundoff-sized stds
    fallback = spread[varying].mean() if varying.any() else 1.0
    ls = np.where(varying, spread, fallback)
    qvar = max(float(q.var()), 1e-4)
    theta = [math.log(qvar)]
    theta += list(np.log(ls))
    theta.append(math.log(0.1 * qvar))
    if kind == "rq":
        theta.append(0.0)  # rq_alpha = 1
    return np.array(theta)


def _ascend(theta0, X, q, kind, max_iters, tol):
    """Gradient ascent with Armijo backtracking on the log likelihood.

    Steps are taken along the normalized gradient so the line search works
    at the scale of the log-parameter space regardless of data size.
    """
    theta = theta0.copy()
    value, grad = log_marginal_likelihood(theta, X, q, kind, eval_gradient=True)
    if not np.isfinite(value):
        return theta, -np.inf
    step = 0.5
    for _ in range(max_iters):
        gnorm = float(np.sqrt(grad @ grad))
        if gnorm < 1e-9:
            break
        direction = grad / gnorm
        step = min(step * 2.0, 2.0)
        improved = False
        while step > 1e-10:
            cand = theta + step * direction
            cand_value = log_marginal_likelihood(cand, X, q, kind)
            if np.isfinite(cand_value) and cand_value >= value + 1e-4 * step * gnorm:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        gain = cand_value - value
        theta = cand
        value, grad = log_marginal_likelihood(theta, X, q, kind, eval_gradient=True)
        if gain < tol:
            break
    return theta, value


def train_gp(X, q, kind: str = "se", seed: int = 0,
             restarts: int = DEFAULT_RESTARTS, max_iters: int = DEFAULT_MAX_ITERS,
             tol: float = DEFAULT_TOL, max_points: int = DEFAULT_MAX_POINTS) -> GPModel:
    """Fit kernel hyperparameters by maximum marginal likelihood.

    Runs ``restarts`` independent ascents (the first from a data-driven
    heuristic, the rest from seeded log-space perturbations of it) and keeps
    the best; ties keep the earliest restart.  Exact GP cost is cubic, so
    training sets larger than ``max_points`` are subsampled with the seed.
    """
    X = np.asarray(X, dtype=float)
    q = np.asarray(q, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least 2 training points")
    if np.isnan(X).any():
        raise ValueError("training inputs must be complete (no missing values)")
    if X.shape[0] > max_points:
        rng = np.random.default_rng([seed, 0x5eed])
        keep = np.sort(rng.choice(X.shape[0], size=max_points, replace=False))
        X, q = X[keep], q[keep]

    base = _initial_theta(X, q, kind)
    best_theta, best_value = None, -np.inf
    for r in range(restarts):
        if r == 0:
            theta0 = base
        else:
            rng = np.random.default_rng([seed, r])
            theta0 = base + rng.normal(0.0, 0.7, size=base.size)
        theta, value = _ascend(theta0, X, q, kind, max_iters, tol)
        if value > best_value:
            best_theta, best_value = theta, value
    if best_theta is None or not np.isfinite(best_value):
        raise TrainingError("no restart produced a finite likelihood")
    params = _theta_to_params(best_theta, kind, X.shape[1])
    return GPModel(X, q, params, log_likelihood=best_value)


def predict_batch(model: GPModel, Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and (latent) variance at each row of ``Xs``."""
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    Ks = kernel_gram(model.params, Xs, model.X)
    means = Ks @ model.alpha
    V = solve_triangular(model.L, Ks.T, lower=True)
    variances = model.params.signal_variance - (V * V).sum(axis=0)
    return means, np.maximum(variances, 0.0)


def predict(model: GPModel, x) -> GaussPred:
    means, variances = predict_batch(model, np.asarray(x, dtype=float)[None, :])
    return GaussPred(float(means[0]), float(variances[0]))


def predict_uncertain(model: GPModel, input_mean, input_cov) -> GaussPred:
    """Exact moments of the posterior under a Gaussian input distribution.

    Closed form for the squared-exponential kernel (moment matching); the
    result is the Gaussian with the true mean and variance of the predictive
    mixture, so zero input covariance reproduces ``predict`` exactly.
    """
    if model.params.kind != "se":
        raise ValueError("uncertain-input prediction supports the SE kernel only")
    mu = np.asarray(input_mean, dtype=float)
    S = np.atleast_2d(np.asarray(input_cov, dtype=float))
    n = model.dim
    if mu.shape != (n,) or S.shape != (n, n):
        raise ValueError("input mean/cov shape mismatch")
    sv = model.params.signal_variance
    ell2 = model.params.length_scales ** 2
    Lam = np.diag(ell2)
    Z = model.X - mu

    A = S + Lam
    cA = cholesky(A, lower=True)
    half = solve_triangular(cA, Z.T, lower=True)
    quad_a = (half * half).sum(axis=0)
    logdet_ratio = 2.0 * np.log(np.diag(cA)).sum() - np.log(ell2).sum()
    qvec = sv * math.exp(-0.5 * logdet_ratio) * np.exp(-0.5 * quad_a)
    mean = float(model.alpha @ qvec)

    B = S + 0.5 * Lam
    cB = cholesky(B, lower=True)
    halfB = solve_triangular(cB, Z.T, lower=True)
    G = halfB.T @ halfB                       # Z B^-1 Z^T
    W = Z / model.params.length_scales
    ww = (W * W).sum(axis=1)
    pair = ww[:, None] + ww[None, :] - 2.0 * (W @ W.T)   # d_ij' Lam^-1 d_ij
    gd = np.diag(G)
    cross = gd[:, None] + gd[None, :] + 2.0 * G          # (z_i+z_j)' B^-1 (z_i+z_j)
    logdet2 = (2.0 * np.log(np.diag(cB)).sum()
               + n * math.log(2.0) - np.log(ell2).sum())  # log |I + 2 S Lam^-1|
    Q = sv * sv * math.exp(-0.5 * logdet2) * np.exp(
        -0.25 * np.maximum(pair, 0.0) - 0.125 * cross)

    Kinv_Q = cho_solve((model.L, True), Q)
    variance = (sv - float(np.trace(Kinv_Q))
                + float(model.alpha @ Q @ model.alpha) - mean * mean)
    return GaussPred(mean, max(0.0, variance))


def ard_values(model: GPModel) -> np.ndarray:
    """Per-dimension length scales; smaller means the feature matters more."""
    return model.params.length_scales.copy()


# --- grid smoothness prior and Gibbs marginalization ----------------------

@dataclass(frozen=True)
class SmoothnessPrior:
    """Gaussian MRF over elevation bins: pairwise precision on 4-neighbor
    height differences plus a weak anchor that keeps the field proper when
    nothing is observed."""

    grid: Grid
    tau: float                 # precision on neighbor differences
    anchor_mean: float = 0.0
    anchor_tau: float = 1e-2
    height_var: float = 1.0    # marginal height spread seen in training

    @classmethod
    def fit(cls, height_grids, grid: Grid) -> "SmoothnessPrior":
        diffs = []
        values = []
        for h in height_grids:
            h = np.asarray(h, dtype=float)
            diffs.append(np.diff(h, axis=0).ravel())
            diffs.append(np.diff(h, axis=1).ravel())
            values.append(h.ravel())
        diffs = np.concatenate(diffs)
        values = np.concatenate(values)
        diff_var = max(float(diffs.var()), 1e-6)
        height_var = max(float(values.var()), 1e-6)
        return cls(grid=grid, tau=1.0 / diff_var,
                   anchor_mean=float(values.mean()),
                   anchor_tau=1.0 / (10.0 * height_var),
                   height_var=height_var)

    def neighbors(self, bin_index: int) -> list[int]:
        r, c = divmod(bin_index, self.grid.cols)
        out = []
        if r > 0:
            out.append(bin_index - self.grid.cols)
        if r < self.grid.rows - 1:
            out.append(bin_index + self.grid.cols)
        if c > 0:
            out.append(bin_index - 1)
        if c < self.grid.cols - 1:
            out.append(bin_index + 1)
        return out


def gibbs_marginalize(model: GPModel, state: StateVector, prior: SmoothnessPrior,
                      n_samples: int = 300, burn_in: int = 50, seed: int = 0,
                      collapse: bool = True):
    """Marginalize the prediction over missing elevation bins.

    Runs a Gibbs chain over the missing heights under the smoothness prior
    (conditioning on observed neighbors), pushes each completed state through
    the exact posterior, and collapses the resulting mixture by moment
    matching.  ``collapse=False`` returns the raw mixture instead, for the
    mixture-exact safety integral.
    """
    missing_idx = np.flatnonzero(state.missing)
    if missing_idx.size == 0:
        pred = predict(model, state.values)
        return pred if collapse else GaussMixture(np.array([pred.mean]),
                                                  np.array([pred.variance]))
    pdim = prior.grid.proprio_dim
    if (missing_idx < pdim).any():
        raise ValueError("missing mask is only allowed on elevation bins")
    bins = missing_idx - pdim
    bin_set = {int(b): k for k, b in enumerate(bins)}

    values = state.values.copy()
    observed_dem = ~state.missing[pdim:]
    if observed_dem.any():
        fill = float(values[pdim:][observed_dem].mean())
    else:
        fill = prior.anchor_mean
    heights = {int(b): fill for b in bins}

    rng = np.random.default_rng(seed)
    completions = np.empty((n_samples, values.size))
    kept = 0
    for sweep in range(burn_in + n_samples):
        for b in sorted(heights):
            acc_p = prior.anchor_tau
            acc_m = prior.anchor_tau * prior.anchor_mean
            for nb in prior.neighbors(b):
                if nb in heights:
                    h = heights[nb]
                else:
                    h = values[pdim + nb]
                acc_p += prior.tau
                acc_m += prior.tau * h
            mean = acc_m / acc_p
            heights[b] = mean + rng.standard_normal() / math.sqrt(acc_p)
        if sweep >= burn_in:
            for b, k in bin_set.items():
                values[pdim + b] = heights[b]
            completions[kept] = values
            kept += 1
    means, variances = predict_batch(model, completions)
    mixture = GaussMixture(means, variances)
    return mixture.collapse() if collapse else mixture


# --- serialization -------------------------------------------------------

GP_FORMAT = "adaptrav-gp v1"


def gp_to_text(model: GPModel) -> str:
    p = model.params
    lines = [GP_FORMAT,
             "kind %s" % p.kind,
             "shape %d %d" % model.X.shape,
             "signal_variance %r" % float(p.signal_variance),
             "noise_variance %r" % float(p.noise_variance),
             "rq_alpha %s" % ("-" if p.rq_alpha is None else repr(float(p.rq_alpha))),
             "length_scales " + " ".join(repr(float(v)) for v in p.length_scales),
             "q " + " ".join(repr(float(v)) for v in model.q)]
    for row in model.X:
        lines.append("x " + " ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def gp_from_text(text: str) -> GPModel:
    lines = text.strip().splitlines()
    if lines[0].strip() != GP_FORMAT:
        raise ValueError("unrecognized GP file format: %r" % lines[0])
    fields = {}
    rows = []
    for ln in lines[1:]:
        key, rest = ln.split(" ", 1)
        if key == "x":
            rows.append([float(t) for t in rest.split()])
        else:
            fields[key] = rest
    m, n = (int(t) for t in fields["shape"].split())
    X = np.array(rows)
    if X.shape != (m, n):
        raise ValueError("GP file body does not match declared shape")
    q = np.array([float(t) for t in fields["q"].split()])
    rq = fields["rq_alpha"]
    params = KernelParams(
        kind=fields["kind"],
        signal_variance=float(fields["signal_variance"]),
        length_scales=np.array([float(t) for t in fields["length_scales"].split()]),
        noise_variance=float(fields["noise_variance"]),
        rq_alpha=None if rq == "-" else float(rq))
    return GPModel(X, q, params)


def save_gp(path, model: GPModel) -> None:
    with open(path, "w") as fh:
        fh.write(gp_to_text(model))


def load_gp(path) -> GPModel:
    with open(path) as fh:
        return gp_from_text(fh.read())


GP_SET_FORMAT = "adaptrav-gp-set v1"


def save_gp_set(path, models: dict) -> None:
    """One file holding the per-configuration models."""
    with open(path, "w") as fh:
        fh.write(GP_SET_FORMAT + "\n")
        fh.write("configs %d\n" % len(models))
        for c in sorted(models):
            fh.write("config %d\n" % c)
            fh.write(gp_to_text(models[c]))
            fh.write("end\n")


def load_gp_set(path) -> dict:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if lines[0].strip() != GP_SET_FORMAT:
        raise ValueError("unrecognized GP set file format: %r" % lines[0])
    models = {}
    i = 2
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        config = int(lines[i].split()[1])
        j = lines.index("end", i)
        models[config] = gp_from_text("\n".join(lines[i + 1:j]))
        i = j + 1
    return models
