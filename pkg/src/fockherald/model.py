"""Analytic models for quantized electron energy loss and photon counting.

Per electron, the number of photons emitted into the guided mode is
Poissonian with mean ``g0**2`` for a fixed electron-mode coupling ``g0``.
Beam convergence and slow pointing drift spread the coupling across
electrons; we model that spread by letting ``G = g0**2`` follow a Gamma
distribution, which keeps the photon-number mixture (a negative binomial)
and all sideband populations in closed form while matching a reported
(mean, std) of ``g0``.

The electron spectrum model composes three independent loss channels on an
energy grid: a Gaussian zero-loss peak, the discrete sideband comb from
photon emission (one Gaussian per order, broadened by the phase-matching
bandwidth), and an optional broadband material-loss continuum (Bernoulli
gate into an exponential tail).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize, signal, special

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

# The zero-loss noise model is a Gaussian restricted to +-3 sigma: real
# zero-loss tails are not Gaussian anyway, and the event streams guarantee
# a -3 sigma loss floor, so model and data cut off together.
ZLP_TRUNCATION = 3.0


def _log_sqrt_gamma_ratio(alpha: float) -> float:
    """log[Gamma(a+1/2) / (Gamma(a) * sqrt(a))], stable for any a > 0.

    The naive gammaln difference cancels catastrophically for large a, where
    the value goes like -1/(8a); switch to the asymptotic expansion of
    Gamma(a+1/2)/Gamma(a) = sqrt(a) (1 - 1/(8a) + 1/(128a^2) + 5/(1024a^3) - ...).
    """
    if alpha < 1e4:
        return float(special.gammaln(alpha + 0.5) - special.gammaln(alpha)
                     - 0.5 * math.log(alpha))
    u = 1.0 / alpha
    return math.log1p(-u / 8.0 + u * u / 128.0 + 5.0 * u**3 / 1024.0)


class SpectrumFitError(RuntimeError):
    """Spectrum fit did not converge; carries the last residual norm."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.4g})")
        self.residual = residual


@dataclass(frozen=True)
class CouplingSpec:
    """Electron-mode coupling distribution: mean and spread of g0.

    ``std_g0 = 0`` is the fixed-coupling (pure Poisson) case.  Otherwise
    ``G = g0**2`` is Gamma distributed with shape/scale chosen so that
    ``E[sqrt(G)] = mean_g0`` and ``Var[sqrt(G)] = std_g0**2``.
    """

    mean_g0: float
    std_g0: float = 0.0

    def __post_init__(self):
        if self.mean_g0 < 0 or self.std_g0 < 0:
            raise ValueError("mean_g0 and std_g0 must be non-negative")

    @property
    def mean_g_squared(self) -> float:
        # E[G] = E[g0]^2 + Var(g0)
        return self.mean_g0**2 + self.std_g0**2

    def gamma_params(self) -> tuple[float, float] | None:
        """(shape, scale) of the Gamma law for G, or None when fixed.

        Spreads below 1e-5 of the mean are numerically indistinguishable
        from fixed coupling and collapse to the degenerate case.
        """
        if self.std_g0 <= 1e-5 * self.mean_g0:
            return None
        if self.mean_g0 == 0.0:
            raise ValueError("std_g0 > 0 requires mean_g0 > 0")
        m2 = self.mean_g_squared
        target = math.log(self.mean_g0 / math.sqrt(m2))  # log E[sqrt(G)]/sqrt(E[G]) < 0

        def logratio(log_alpha: float) -> float:
            return _log_sqrt_gamma_ratio(math.exp(log_alpha)) - target

        log_alpha = optimize.brentq(logratio, -30.0, 30.0, xtol=1e-14, rtol=1e-15)
        alpha = math.exp(log_alpha)
        return alpha, m2 / alpha

    def sample_g_squared(self, rng: np.random.Generator, n: int) -> np.ndarray:
        params = self.gamma_params()
        if params is None:
            return np.full(n, self.mean_g_squared)
        alpha, theta = params
        return rng.gamma(alpha, theta, size=n)


@dataclass
class SidebandPopulations:
    """Probabilities of the loss orders m = 0..m_max (may not sum to 1)."""

    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)

    @property
    def m_max(self) -> int:
        return len(self.p) - 1

    def tail_mass(self) -> float:
        return max(0.0, 1.0 - float(self.p.sum()))

    def ratio(self, m: int) -> float:
        """p_{m+1} / p_m."""
        return float(self.p[m + 1] / self.p[m])


def sideband_populations(g0: float, m_max: int) -> SidebandPopulations:
    """Poisson populations p_m = exp(-g0^2) g0^(2m) / m! for fixed coupling."""
    if g0 < 0:
        raise ValueError("g0 must be non-negative")
    if m_max < 0:
        raise ValueError("m_max must be non-negative")
    m = np.arange(m_max + 1)
    lam = g0 * g0
    with np.errstate(divide="ignore"):
        logp = -lam + m * np.log(lam) if lam > 0 else np.where(m == 0, 0.0, -np.inf)
    if lam > 0:
        logp = logp - special.gammaln(m + 1)
    return SidebandPopulations(np.exp(logp))


def mixed_sideband_populations(coupling: CouplingSpec, m_max: int) -> SidebandPopulations:
    """Populations averaged over the coupling distribution.

    For Gamma-distributed G the mixture is negative binomial:
    p_m = C(m+alpha-1, m) phi^m (1-phi)^alpha with phi = theta/(1+theta).
    Reduces exactly to ``sideband_populations`` when std_g0 = 0.
    """
    if m_max < 0:
        raise ValueError("m_max must be non-negative")
    params = coupling.gamma_params()
    if params is None:
        return sideband_populations(coupling.mean_g0, m_max)
    alpha, theta = params
    phi = theta / (1.0 + theta)
    m = np.arange(m_max + 1)
    logp = (
        special.gammaln(m + alpha)
        - special.gammaln(alpha)
        - special.gammaln(m + 1)
        + m * math.log(phi)
        + alpha * math.log1p(-phi)
    )
    return SidebandPopulations(np.exp(logp))


@dataclass
class CouplingFit:
    """fit_coupling_from_sidebands result; ``sub_poissonian`` flags inputs whose
    ratios admit no non-negative coupling variance (fixed-coupling fallback)."""

    coupling: CouplingSpec
    sub_poissonian: bool = False


def fit_coupling_from_sidebands(p0: float, p1: float, p2: float) -> CouplingFit:
    """Invert the first three sideband populations to a CouplingSpec.

    Uses the closed-form moment relations of the Gamma mixture:
    r1 = p1/p0 = alpha*phi and r2 = p2/p1 = (alpha+1)*phi/2, so
    phi = 2*r2 - r1.  phi <= 0 means the ratios are at or below the pure
    Poisson line; those inputs return the fixed-coupling fit (std 0),
    flagged when strictly sub-Poissonian.
    """
    if p0 <= 0 or p1 < 0 or p2 < 0:
        raise ValueError("need p0 > 0 and p1, p2 >= 0")
    r1 = p1 / p0
    if r1 == 0.0:
        return CouplingFit(CouplingSpec(0.0, 0.0), sub_poissonian=p2 > 0)
    r2 = p2 / p1
    phi = 2.0 * r2 - r1
    if phi <= max(1e-12, 1e-9 * r1):
        return CouplingFit(CouplingSpec(math.sqrt(r1), 0.0), sub_poissonian=phi < 0)
    if phi >= 1.0:
        raise ValueError(f"sideband ratios imply a divergent coupling mixture (phi={phi:.4g})")
    alpha = r1 / phi
    theta = phi / (1.0 - phi)
    mean_g2 = alpha * theta
    logdiff = _log_sqrt_gamma_ratio(alpha)
    mean_g0 = math.sqrt(mean_g2) * math.exp(logdiff)
    var_g0 = mean_g2 * -math.expm1(2.0 * logdiff)
    return CouplingFit(CouplingSpec(mean_g0, math.sqrt(max(var_g0, 0.0))))


def predicted_bunching(electron_rate: float, bin_width: float) -> float:
    """Accidental-normalized pair excess at zero delay: 1 + 1/(rate * bin).

    Photons bunch within single electrons (Poisson photon number per
    electron), so the zero-delay cross-correlation carries one extra pair
    per electron relative to the accidental floor, independent of the
    coupling strength and of any detection losses.
    """
    if electron_rate <= 0 or bin_width <= 0:
        raise ValueError("electron_rate and bin_width must be positive")
    return 1.0 + 1.0 / (electron_rate * bin_width)


@dataclass
class SpectrumParams:
    """Parameters of the electron energy-loss spectrum model."""

    zlp_sigma: float  # eV, Gaussian zero-loss peak width
    photon_energy: float  # eV, sideband spacing
    coupling: CouplingSpec
    continuum_prob: float = 0.0  # chance of a broadband material loss
    continuum_decay: float = 1.0  # eV, exponential decay constant
    pm_bandwidth: float = 0.065  # eV FWHM of the phase-matching envelope

    def __post_init__(self):
        if self.zlp_sigma <= 0 or self.photon_energy <= 0:
            raise ValueError("zlp_sigma and photon_energy must be positive")
        if not 0.0 <= self.continuum_prob <= 1.0:
            raise ValueError("continuum_prob must be a probability")
        if self.continuum_decay <= 0 or self.pm_bandwidth <= 0:
            raise ValueError("continuum_decay and pm_bandwidth must be positive")


def _gaussian_bin_mass(centers: np.ndarray, step: float, mu: float, sigma: float,
                       truncate: float | None = None) -> np.ndarray:
    """Probability mass in bins [c - step/2, c + step/2] of N(mu, sigma^2).

    ``truncate`` restricts the distribution to mu +- truncate*sigma and
    renormalizes (the zero-loss noise floor carries no mass beyond 3 sigma).
    """
    if sigma < 1e-12 * step:
        mass = np.zeros_like(centers)
        idx = int(np.argmin(np.abs(centers - mu)))
        if abs(centers[idx] - mu) <= step:
            mass[idx] = 1.0
        return mass
    lo = centers - 0.5 * step
    hi = centers + 0.5 * step
    if truncate is not None:
        bound = truncate * sigma
        lo = np.clip(lo, mu - bound, mu + bound)
        hi = np.clip(hi, mu - bound, mu + bound)
        norm = math.erf(truncate / math.sqrt(2))
    else:
        norm = 1.0
    mass = 0.5 * (special.erf((hi - mu) / (sigma * math.sqrt(2)))
                  - special.erf((lo - mu) / (sigma * math.sqrt(2))))
    return mass / norm


def _populations_for_model(params: SpectrumParams, tail: float = 1e-12) -> np.ndarray:
    m_max = 2
    while True:
        pops = mixed_sideband_populations(params.coupling, m_max)
        if pops.tail_mass() < tail or m_max >= 60:
            return pops.p
        m_max += 4


def _check_grid(grid: np.ndarray, zlp_sigma: float) -> float:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 3:
        raise ValueError("grid must be a 1-D axis with at least 3 points")
    steps = np.diff(grid)
    if np.any(steps <= 0):
        raise ValueError("grid must be strictly increasing")
    step = float(steps[0])
    if not np.allclose(steps, step, rtol=1e-9, atol=0):
        raise ValueError("grid must be uniformly spaced")
    if step > zlp_sigma / 4.0:
        raise ValueError(
            f"grid step {step:.4g} eV undersamples the zero-loss peak "
            f"(need <= zlp_sigma/4 = {zlp_sigma / 4.0:.4g} eV)"
        )
    return step


SUPERSAMPLE = 8  # internal lattice refinement of the grid step


def _spectrum_kernels(params: SpectrumParams, fine: float, anchor_z: float,
                      populations: np.ndarray):
    """Bin-mass kernels of the three loss channels on the internal lattice.

    The zero-loss kernel is binned on ``anchor_z + j*fine`` (it carries the
    output lattice anchor); the comb and continuum kernels sit on ``k*fine``.
    Returns (z_mass, z_first_index, s_mass, c_mass).
    """
    nz = max(2, int(math.ceil(3.5 * params.zlp_sigma / fine)) + 1)
    z_centers = anchor_z + np.arange(-nz, nz + 1) * fine
    z_mass = _gaussian_bin_mass(z_centers, fine, 0.0, params.zlp_sigma,
                                truncate=ZLP_TRUNCATION)

    sigma_top = len(populations) * params.pm_bandwidth * FWHM_TO_SIGMA
    s_hi = int(math.ceil(((len(populations) - 1) * params.photon_energy
                          + 8 * sigma_top) / fine)) + 1
    s_centers = np.arange(0, s_hi + 1) * fine
    s_mass = np.zeros_like(s_centers)
    for m, pm in enumerate(populations):
        if pm <= 0:
            continue
        sigma_m = m * params.pm_bandwidth * FWHM_TO_SIGMA
        s_mass += pm * _gaussian_bin_mass(s_centers, fine, m * params.photon_energy, sigma_m)

    q = params.continuum_prob
    if q > 0:
        d = params.continuum_decay
        nc = int(math.ceil(30.0 * d / fine)) + 1
        edges = np.clip((np.arange(nc + 2) - 0.5) * fine, 0.0, None)
        c_mass = q * np.diff(1.0 - np.exp(-edges / d))
        c_mass[0] += 1.0 - q
    else:
        c_mass = np.array([1.0])
    return z_mass, -nz, s_mass, c_mass


def _spectrum_masses(params: SpectrumParams, step: float, n_lo: int, n_hi: int,
                     populations: np.ndarray | None = None,
                     anchor: float = 0.0) -> np.ndarray:
    """Loss-probability mass in bins centered at anchor + j*step, j in [-n_lo, n_hi].

    The three channels are discretized on a SUPERSAMPLE-times finer internal
    lattice whose bins nest exactly inside the requested bins, composed by
    discrete (FFT) convolution, and aggregated back; the discretization error
    is O((step/SUPERSAMPLE)^2) and independent of the requested resolution.
    """
    pops = _populations_for_model(params) if populations is None else populations
    fine = step / SUPERSAMPLE
    # internal bin r of requested bin j covers
    # [anchor + (j-1/2)*step + r*fine, ... + fine); its center:
    anchor_z = anchor - step / 2.0 + fine / 2.0
    z_mass, z_first, s_mass, c_mass = _spectrum_kernels(params, fine, anchor_z, pops)

    total = signal.fftconvolve(signal.fftconvolve(z_mass, s_mass), c_mass)
    total = np.clip(total, 0.0, None)

    n_bins = n_lo + n_hi + 1
    out = np.zeros(n_bins)
    # requested bin j starts at internal index j*SUPERSAMPLE relative to the
    # anchored internal origin; kernel index 0 sits at z_first
    ks = (np.arange(-n_lo, n_hi + 1) * SUPERSAMPLE) - z_first
    for r in range(SUPERSAMPLE):
        k = ks + r
        valid = (k >= 0) & (k < len(total))
        out[valid] += total[k[valid]]
    return out


def spectrum_model(params: SpectrumParams, grid: np.ndarray,
                   populations: np.ndarray | None = None) -> np.ndarray:
    """Normalized loss-spectrum density sampled on a uniform energy grid.

    The three loss channels (zero-loss noise, sideband comb, continuum) are
    discretized as bin-integrated masses on the grid lattice and composed by
    discrete convolution; the returned density integrates to 1 over the grid.
    ``populations`` overrides the coupling-derived sideband weights (used by
    the fitter to free the individual areas).
    """
    grid = np.asarray(grid, dtype=float)
    step = _check_grid(grid, params.zlp_sigma)
    # split the grid origin into an integer lattice index plus a sub-step anchor
    j0 = int(round(grid[0] / step))
    anchor = grid[0] - j0 * step
    n = len(grid)
    n_lo = max(0, -j0)
    n_hi = max(0, j0 + n - 1)
    masses = _spectrum_masses(params, step, n_lo, n_hi, populations, anchor=anchor)
    idx = j0 + np.arange(n) + n_lo
    density = masses[idx] / step
    norm = float(np.sum(density) * step)
    if norm <= 0:
        raise ValueError("spectrum model has no weight on the requested grid")
    return density / norm


@dataclass
class SpectrumFit:
    params: SpectrumParams
    populations: SidebandPopulations
    goodness: float  # reduced chi^2 of the weighted fit
    coupling_fit: CouplingFit
    n_iterations: int = 0


def fit_spectrum(counts: np.ndarray, grid: np.ndarray, init: SpectrumParams,
                 n_orders: int = 4, max_nfev: int = 4000) -> SpectrumFit:
    """Least-squares fit of the spectrum model to a measured loss histogram.

    Sideband areas are fit freely (one non-negative weight per order) along
    with the peak width, spacing and continuum parameters; the coupling
    distribution is then recovered from the fitted areas of the first three
    orders.  Damped bounded least squares with a numerical Jacobian.
    """
    counts = np.asarray(counts, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if counts.shape != grid.shape:
        raise ValueError("counts and grid must have the same shape")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    step = _check_grid(grid, init.zlp_sigma)
    span = grid[-1] - grid[0]
    if span < 2.5 * init.photon_energy:
        raise ValueError("histogram range too short to resolve three sidebands")

    total = counts.sum()
    if total <= 0:
        raise ValueError("histogram is empty")
    density = counts / (total * step)
    sigma_d = np.sqrt(counts + 1.0) / (total * step)

    # data-driven area seed: crude window sums around the expected comb
    w0 = init.photon_energy
    rough = np.array([
        float(counts[(grid >= m * w0 - w0 / 2) & (grid < m * w0 + w0 / 2)].sum())
        for m in range(n_orders + 1)
    ])
    rough = np.clip(rough, 1.0, None)
    seed_ratios = rough[1:] / rough[0]

    model_pops = mixed_sideband_populations(init.coupling, n_orders).p
    model_pops = np.clip(model_pops / model_pops.sum(), 1e-9, None)

    # theta = [areas_1..n relative to area_0, zlp_sigma, photon_energy, q, decay]
    def start(ratios, q0, d0):
        return np.concatenate(
            [ratios, [init.zlp_sigma, init.photon_energy,
                      min(max(q0, 1e-4), 1 - 1e-4), d0]]
        )

    starts = [
        start(seed_ratios, init.continuum_prob, init.continuum_decay),
        start(model_pops[1:] / model_pops[0], init.continuum_prob, init.continuum_decay),
        start(seed_ratios, 1e-3, 3.0),
    ]
    lo = np.concatenate([np.zeros(n_orders), [step / 2.0, 0.3, 0.0, 0.05]])
    hi = np.concatenate([np.full(n_orders, 10.0), [5.0, 3.0, 1.0, 50.0]])

    def unpack(x):
        rel = np.concatenate([[1.0], x[:n_orders]])
        pops = rel / rel.sum()
        params = replace(
            init,
            zlp_sigma=float(x[n_orders]),
            photon_energy=float(x[n_orders + 1]),
            continuum_prob=float(x[n_orders + 2]),
            continuum_decay=float(x[n_orders + 3]),
        )
        return params, pops

    def residuals(x):
        params, pops = unpack(x)
        model = spectrum_model(params, grid, populations=pops)
        return (model - density) / sigma_d

    dof = max(1, len(grid) - (n_orders + 4))
    best = None
    last_residual = math.inf
    for x0 in starts:
        result = optimize.least_squares(
            residuals, np.clip(x0, lo, hi), bounds=(lo, hi), method="trf",
            xtol=1e-8, ftol=1e-10, gtol=1e-10, max_nfev=max_nfev,
        )
        last_residual = float(np.sum(result.fun**2))
        if result.status <= 0:
            continue
        params, pops = unpack(result.x)
        try:
            cfit = fit_coupling_from_sidebands(pops[0], pops[1], pops[2])
        except ValueError:
            continue  # degenerate basin; try the next start
        chi2 = last_residual / dof
        if best is None or chi2 < best.goodness:
            best = SpectrumFit(
                params=replace(params, coupling=cfit.coupling),
                populations=SidebandPopulations(pops),
                goodness=chi2,
                coupling_fit=cfit,
                n_iterations=int(result.nfev),
            )
    if best is None:
        raise SpectrumFitError("spectrum fit did not converge", last_residual)
    return best
