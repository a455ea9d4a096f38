"""Numerical sandbox for the asymptotic-equivalence argument on toy
problems.

The object of study is the alternating chain between two conditionals: a
parameter draw given the current synthetic set, pi(theta | D~) ~
exp(-beta_star * f(theta, D~)), and a synthetic-set draw scored by how well
its trained solution fits the real data, pi(D~ | theta) ~
exp(-beta_D * f(theta*(D~), D_real)). At low temperature the synthetic
sets concentrate on those whose minimizer set intersects the real data's
minimizer set (the support condition), which is what makes training on
distilled data stand in for training on the real thing.

Both conditionals are sampled with Metropolis-adjusted Langevin steps and
burn-in step-size tuning. The linear-regression family keeps the synthetic
design matrix fixed at the real one and samples targets only; solutions
are exact minimum-norm least squares, so all energies and gradients are in
closed form.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("quadratic", "linreg")

# weak Gaussian prior that keeps the parameter conditional proper on the
# zero-loss submanifold of overparameterized problems; also sets the
# null-space relaxation time, so it cannot be arbitrarily small
_RIDGE = 0.1


@dataclass
class ToyProblem:
    """Per-agent datasets with a mean-squared-error loss.

    quadratic: data_m is a point cloud (n, d); f(theta, D) is the mean
    squared distance from theta to the points (minimizer: the mean).
    linreg: data_m is (X (n, d), y (n,)); f is mean squared residual
    (minimizer: min-norm least squares).
    """
    family: str
    agents: list
    d: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not self.agents:
            raise ValueError("need at least one agent")

    def loss(self, theta: np.ndarray, data) -> float:
        if self.family == "quadratic":
            return float(np.mean(np.sum((data - theta) ** 2, axis=1)))
        x, y = data
        return float(np.mean((x @ theta - y) ** 2))

    def solve(self, data) -> np.ndarray:
        """Exact minimizer: mean point, or minimum-norm least squares."""
        if self.family == "quadratic":
            return np.asarray(data).mean(axis=0)
        x, y = data
        sol, *_ = np.linalg.lstsq(x, y, rcond=None)
        return sol


def make_quadratic(d: int = 2, agents: int = 1, n: int = 12, seed: int = 0,
                   spread: float = 1.0) -> ToyProblem:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x40AD]))
    data = [rng.normal(scale=spread, size=(n, d)) + rng.normal(scale=2.0, size=d)
            for _ in range(agents)]
    return ToyProblem("quadratic", data, d)


def make_overparam_linreg(d: int = 20, n: int = 10, agents: int = 1,
                          seed: int = 0) -> ToyProblem:
    """Parameter count exceeds sample count, so every agent has a
    submanifold of zero-loss solutions."""
    if d <= n:
        raise ValueError(f"overparameterized needs d > n, got d={d}, n={n}")
    return make_linreg(d, n, agents, seed)


def make_linreg(d: int, n: int, agents: int = 1, seed: int = 0) -> ToyProblem:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11E6]))
    data = []
    theta_true = rng.normal(size=d)
    for _ in range(agents):
        x = rng.normal(size=(n, d)) / np.sqrt(d)
        y = x @ theta_true + rng.normal(scale=0.05, size=n)
        data.append((x, y))
    return ToyProblem("linreg", data, d)


@dataclass
class Chain:
    """Alternating-sampler output (post burn-in states included)."""
    thetas: np.ndarray          # (steps, d)
    synth: np.ndarray           # (steps, state_dim) flattened synthetic sets
    energy: np.ndarray          # (steps,) combined energy at each step
    accept_theta: float
    accept_synth: float
    step_theta: float
    step_synth: float
    burn_in: int

    def synth_dataset(self, p: ToyProblem, agent: int, index: int = -1):
        """Reconstruct the synthetic dataset at one chain index."""
        state = self.synth[index]
        if p.family == "quadratic":
            return state.reshape(-1, p.d)
        x, _ = p.agents[agent]
        return (x, state.copy())


class _Mala:
    """Metropolis-adjusted Langevin with burn-in step tuning.

    Tuning reacts in proportion to how far the windowed acceptance rate is
    from the target (large jumps at the extremes), then freezes so the
    post-tune kernel satisfies detailed balance exactly.
    """

    def __init__(self, energy, gradient, step, rng, target=0.574,
                 window=20, tune_steps=500):
        self.energy = energy
        self.gradient = gradient
        self.step = step
        self.rng = rng
        self.target = target
        self.window = window
        self.tune_steps = tune_steps
        self.attempts = 0
        self.accepts = 0
        self.post_attempts = 0
        self.post_accepts = 0
        self._recent = []

    def move(self, x: np.ndarray) -> np.ndarray:
        s = self.step
        gx = self.gradient(x)
        mean_fwd = x - s * gx
        prop = mean_fwd + np.sqrt(2 * s) * self.rng.standard_normal(x.shape)
        e_x, e_p = self.energy(x), self.energy(prop)
        if not np.isfinite(e_p):
            accept = False
        else:
            gp = self.gradient(prop)
            mean_rev = prop - s * gp
            log_q_fwd = -np.sum((prop - mean_fwd) ** 2) / (4 * s)
            log_q_rev = -np.sum((x - mean_rev) ** 2) / (4 * s)
            log_alpha = (e_x - e_p) + (log_q_rev - log_q_fwd)
            accept = np.log(self.rng.uniform()) < log_alpha
        self.attempts += 1
        self.accepts += accept
        if self.attempts <= self.tune_steps:
            self._recent.append(accept)
            if len(self._recent) >= self.window:
                rate = float(np.mean(self._recent))
                if rate < 0.05:
                    self.step /= 3.0
                elif rate > 0.95:
                    self.step *= 3.0
                else:
                    self.step *= np.exp(rate - self.target)
                self._recent = []
        else:
            self.post_attempts += 1
            self.post_accepts += accept
        return prop if accept else x

    @property
    def acceptance_rate(self) -> float:
        """Post-tuning acceptance (overall rate if tuning never finished)."""
        if self.post_attempts:
            return self.post_accepts / self.post_attempts
        return self.accepts / max(self.attempts, 1)


def _theta_energy_grad(p: ToyProblem, data, beta_star):
    if p.family == "quadratic":
        pts = np.asarray(data)

        def energy(theta, pts=pts):
            return beta_star * float(np.mean(np.sum((pts - theta) ** 2, axis=1))) \
                + 0.5 * _RIDGE * float(theta @ theta)

        def grad(theta, pts=pts):
            return beta_star * 2.0 * (theta - pts.mean(axis=0)) + _RIDGE * theta
    else:
        x, y = data
        n = x.shape[0]

        def energy(theta, x=x, y=y, n=n):
            r = x @ theta - y
            return beta_star * float(r @ r) / n + 0.5 * _RIDGE * float(theta @ theta)

        def grad(theta, x=x, y=y, n=n):
            return beta_star * 2.0 * (x.T @ (x @ theta - y)) / n + _RIDGE * theta
    return energy, grad


def _synth_energy_grad(p: ToyProblem, agent: int, beta_d):
    """Energy of a candidate synthetic set: real-data loss of its exact
    minimizer (the bilevel objective with the inner problem solved)."""
    real = p.agents[agent]
    if p.family == "quadratic":
        x_bar = np.asarray(real).mean(axis=0)
        const = float(np.mean(np.sum((np.asarray(real) - x_bar) ** 2, axis=1)))

        def energy(state, x_bar=x_bar, const=const):
            mu = state.reshape(-1, p.d).mean(axis=0)
            return beta_d * (float(np.sum((mu - x_bar) ** 2)) + const)

        def grad(state, x_bar=x_bar):
            pts = state.reshape(-1, p.d)
            g = np.broadcast_to(beta_d * 2.0 * (pts.mean(axis=0) - x_bar) / pts.shape[0],
                                pts.shape)
            return g.ravel().copy()
    else:
        x, y = real
        n = x.shape[0]
        # solve(D~) = pinv(X) y~, so the real-data residual of the trained
        # solution is P y~ - y with P the projection onto the row-image
        proj = x @ np.linalg.pinv(x)

        def energy(state, proj=proj, y=y, n=n):
            r = proj @ state - y
            return beta_d * float(r @ r) / n

        def grad(state, proj=proj, y=y, n=n):
            return beta_d * 2.0 * (proj.T @ (proj @ state - y)) / n
    return energy, grad


def mala_chain(energy, gradient, x0, steps: int, seed: int,
               step: float = 0.1, tune_steps: int = 500):
    """Standalone tuned MALA sampler for a fixed target.

    Returns (samples, post-tune acceptance rate, tuned step).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3A1A]))
    kernel = _Mala(energy, gradient, step, rng, tune_steps=tune_steps)
    x = np.asarray(x0, dtype=np.float64).copy()
    out = np.empty((steps, x.size))
    for t in range(steps):
        x = kernel.move(x)
        out[t] = x
    return out, kernel.acceptance_rate, kernel.step


def gibbs_alternate(p: ToyProblem, beta_d: float, beta_star: float,
                    steps: int, seed: int, agent: int = 0,
                    step_theta: float = 0.1, step_synth: float = 0.1,
                    burn_in: int | None = None) -> Chain:
    """Alternate one MALA move on theta | D~ with one on D~ | theta.

    The synthetic conditional scores a candidate set by the real-data loss
    of its exactly-solved minimizer, so the chain is anchored to the real
    dataset. Returns the full chain including burn-in (``burn_in`` marks
    where tuning stopped).
    """
    if beta_d <= 0 or beta_star <= 0:
        raise ValueError("temperatures must be positive")
    if steps < 1:
        raise ValueError("need at least one step")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x61BB5]))
    real = p.agents[agent]
    if p.family == "quadratic":
        synth0 = np.asarray(real).ravel().copy()
    else:
        synth0 = real[1].copy()
    theta = p.solve(real) + 0.01 * rng.standard_normal(p.d)
    burn = burn_in if burn_in is not None else min(max(steps // 3, 100), 2000)

    synth_e, synth_g = _synth_energy_grad(p, agent, beta_d)
    synth_mala = _Mala(synth_e, synth_g, step_synth, rng, tune_steps=burn)

    thetas = np.empty((steps, p.d))
    synths = np.empty((steps, synth0.size))
    energies = np.empty(steps)
    synth = synth0
    theta_mala = None
    for t in range(steps):
        data = synth.reshape(-1, p.d) if p.family == "quadratic" \
            else (real[0], synth)
        theta_e, theta_g = _theta_energy_grad(p, data, beta_star)
        if theta_mala is None:
            theta_mala = _Mala(theta_e, theta_g, step_theta, rng, tune_steps=burn)
        else:
            theta_mala.energy, theta_mala.gradient = theta_e, theta_g
        theta = theta_mala.move(theta)
        synth = synth_mala.move(synth)
        e = theta_e(theta) + synth_e(synth)
        if not np.isfinite(e):
            raise FloatingPointError(f"non-finite chain energy at step {t}")
        thetas[t] = theta
        synths[t] = synth
        energies[t] = e
    return Chain(thetas, synths, energies, theta_mala.acceptance_rate,
                 synth_mala.acceptance_rate, theta_mala.step, synth_mala.step,
                 burn)


def check_support_condition(d_tilde, p: ToyProblem, eps: float,
                            agent: int = 0) -> bool:
    """Train to convergence on the synthetic set (exact solve), then test
    whether the solution also minimizes the real loss to within ``eps``."""
    if p.family == "quadratic":
        data = np.asarray(d_tilde)
        if data.size == 0:
            raise ValueError("synthetic set is empty")
    else:
        data = d_tilde
        if np.asarray(data[1]).size == 0:
            raise ValueError("synthetic set is empty")
    try:
        theta = p.solve(data)
    except np.linalg.LinAlgError as e:
        warnings.warn(f"singular solve on synthetic set: {e}")
        return False
    return p.loss(theta, p.agents[agent]) <= eps


def centralized_vs_distilled(p: ToyProblem, distilled_sets: list) -> float:
    """Distance between the pooled minimum-norm solutions of the distilled
    and the real per-agent datasets."""
    if len(distilled_sets) != len(p.agents):
        raise ValueError("need one distilled set per agent")
    if p.family == "quadratic":
        real = np.concatenate([np.asarray(a) for a in p.agents])
        synth = np.concatenate([np.asarray(s) for s in distilled_sets])
        return float(np.linalg.norm(synth.mean(axis=0) - real.mean(axis=0)))
    xs = np.concatenate([a[0] for a in p.agents])
    ys = np.concatenate([a[1] for a in p.agents])
    xt = np.concatenate([s[0] for s in distilled_sets])
    yt = np.concatenate([s[1] for s in distilled_sets])
    real_sol, *_ = np.linalg.lstsq(xs, ys, rcond=None)
    synth_sol, *_ = np.linalg.lstsq(xt, yt, rcond=None)
    return float(np.linalg.norm(synth_sol - real_sol))


def split_chain_tv(samples: np.ndarray, bins: int = 20) -> float:
    """Total-variation distance between first- and second-half histograms
    of a 1-D projection (the stabilization diagnostic)."""
    samples = np.asarray(samples).ravel()
    half = samples.size // 2
    lo, hi = samples.min(), samples.max()
    if lo == hi:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    h1, _ = np.histogram(samples[:half], bins=edges)
    h2, _ = np.histogram(samples[half:], bins=edges)
    p1 = h1 / max(h1.sum(), 1)
    p2 = h2 / max(h2.sum(), 1)
    return 0.5 * float(np.abs(p1 - p2).sum())


def write_chain_csv(path, chain: Chain) -> None:
    """Chain dump: step, theta coordinates, synthetic coordinates, energy."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        d = chain.thetas.shape[1]
        s = chain.synth.shape[1]
        w.writerow(["step"] + [f"theta_{i}" for i in range(d)]
                   + [f"synth_{i}" for i in range(s)] + ["energy"])
        for t in range(chain.thetas.shape[0]):
            w.writerow([t] + [f"{v:.10g}" for v in chain.thetas[t]]
                       + [f"{v:.10g}" for v in chain.synth[t]]
                       + [f"{chain.energy[t]:.10g}"])


def chain_report(chain: Chain, p: ToyProblem, agent: int = 0,
                 eps: float = 1e-3) -> dict:
    """Structured per-experiment summary."""
    end = chain.synth_dataset(p, agent)
    return {
        "steps": int(chain.thetas.shape[0]),
        "burn_in": int(chain.burn_in),
        "accept_theta": float(chain.accept_theta),
        "accept_synth": float(chain.accept_synth),
        "step_theta": float(chain.step_theta),
        "step_synth": float(chain.step_synth),
        "final_energy": float(chain.energy[-1]),
        "theta_tv_first_coord": split_chain_tv(
            chain.thetas[chain.burn_in:, 0]),
        "support_condition": bool(check_support_condition(end, p, eps, agent)),
    }
