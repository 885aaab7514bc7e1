"""Time integrators for the particle flows.

* ``wgf_step`` / ``run_flow``: explicit-Euler particle transport
  u_j <- u_j + dt * grad_adjoint(u_j, xi_j), with xi_j from the KL score
  difference or the 1-D Kantorovich potential gradient.
* ``hellinger_chi2_step``: reaction dynamics on particle weights with
  frozen positions.
* ``projected_langevin_step``: Euler-Maruyama step of the data-space
  Langevin dynamics preconditioned by A A^T (linear maps only).
* ``deterministic_gd`` / ``deterministic_gd_limit``: the single-point
  gradient-descent baseline and its closed-form limit.

run_flow records the energy of each recorded iterate using the same
kernel evaluations that produce the driver, so diagnostics add no extra
passes over the data.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .divergence import KdeFromSamples, chi2_rate, kl_xi_and_estimate, w2_potential_grad_1d
from .ensemble import KdeConfig, ParticleEnsemble, save_csv
from .errors import NumericsError

__all__ = [
    "FlowConfig",
    "FlowTrajectory",
    "wgf_step",
    "run_flow",
    "hellinger_chi2_step",
    "projected_langevin_step",
    "deterministic_gd",
    "deterministic_gd_limit",
]

_DIVERGENCES = ("kl", "chi2", "w2_1d")


@dataclass(frozen=True)
class FlowConfig:
    """Step size, iteration budget and driver selection for one flow run."""

    dt: float
    n_iters: int
    divergence: str = "kl"
    kde: KdeConfig = field(default_factory=KdeConfig)
    seed: int = 0
    record_every: int = 1

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be > 0")
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.divergence not in _DIVERGENCES:
            raise ValueError(f"divergence must be one of {_DIVERGENCES}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


@dataclass
class FlowTrajectory:
    """Recorded states of one flow run.

    snapshots holds (iteration, u-ensemble, pushed y-ensemble) triples at
    the recording cadence, always including iterations 0 and n_iters;
    energies holds (iteration, divergence estimate) pairs at the same
    iterations.
    """

    snapshots: list
    energies: list
    config: FlowConfig

    @property
    def final_us(self):
        return self.snapshots[-1][1]

    @property
    def final_ys(self):
        return self.snapshots[-1][2]

    def energy_values(self):
        return np.array([e for _, e in self.energies])

    def save(self, outdir, prefix=""):
        """Write energy series and snapshot ensembles as CSV files.

        energy file: ``{prefix}energy.csv`` with columns iter,energy;
        snapshots: ``{prefix}u_{iter:05d}.csv`` / ``{prefix}y_{iter:05d}.csv``.
        """
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, f"{prefix}energy.csv"), "w") as fh:
            fh.write("iter,energy\n")
            for it, e in self.energies:
                fh.write("%d,%.17g\n" % (it, e))
        for it, us, ys in self.snapshots:
            save_csv(us, os.path.join(outdir, f"{prefix}u_{it:05d}.csv"))
            save_csv(ys, os.path.join(outdir, f"{prefix}y_{it:05d}.csv"))


def _ref_samples_1d(ref):
    if not isinstance(ref, KdeFromSamples):
        raise ValueError("w2_1d driver requires a sample-based reference")
    return ref.ensemble.particles[:, 0]


def _transport_driver(ys, ref, cfg):
    """(xi, energy) for the position-moving drivers (kl, w2_1d)."""
    if cfg.divergence == "kl":
        xi, est = kl_xi_and_estimate(ys, ref, cfg.kde)
        return xi, est
    grad = w2_potential_grad_1d(ys, _ref_samples_1d(ref))
    energy = float(np.sum(ys.weights * grad * grad))
    return -grad[:, None], energy


def _move(us, fwd, xi, dt):
    upd = fwd.grad_adjoint_many(us.particles, xi)
    new = us.particles + dt * upd
    if not np.all(np.isfinite(new)):
        raise NumericsError("flow diverged (reduce dt)")
    return us.with_particles(new)


def _reweight(us, g, dt):
    factors = 1.0 + dt * g
    if np.any(factors <= 0.0):
        raise NumericsError("chi2 step too large")
    w = us.weights * factors
    return us.with_weights(w / w.sum())


def wgf_step(us, fwd, ref, cfg):
    """One explicit-Euler transport step u_j <- u_j + dt*grad_adjoint(u_j, xi_j).

    Requires uniform weights: the kl and w2_1d drivers move positions
    only.  Weights and particle count are preserved exactly.
    """
    if cfg.divergence == "chi2":
        raise ValueError("wgf_step moves positions; use hellinger_chi2_step for chi2")
    if not us.is_uniform():
        raise ValueError("wgf_step requires uniform weights")
    ys = ParticleEnsemble(fwd.apply_many(us.particles), us.weights, us.seed_provenance)
    xi, _ = _transport_driver(ys, ref, cfg)
    return _move(us, fwd, xi, cfg.dt)


def hellinger_chi2_step(us, fwd, ref, cfg):
    """One reaction step: w_j <- w_j (1 + dt*g_j), renormalized; positions fixed."""
    ys = ParticleEnsemble(fwd.apply_many(us.particles), us.weights, us.seed_provenance)
    _, g = chi2_rate(ys, ref, cfg.kde)
    return _reweight(us, g, cfg.dt)


def run_flow(us0, fwd, ref, cfg):
    """Iterate the configured flow for cfg.n_iters steps.

    Records snapshots and energies every cfg.record_every iterations plus
    always at iterations 0 and n_iters.  Stepping reuses the recorded
    energy's kernel evaluations, so per-iteration cost does not depend on
    the recording cadence.
    """
    if cfg.divergence != "chi2" and not us0.is_uniform():
        raise ValueError("wgf_step requires uniform weights")
    snapshots = []
    energies = []
    us = us0
    Y = fwd.apply_many(us.particles)
    for it in range(cfg.n_iters):
        ys = ParticleEnsemble(Y, us.weights, us.seed_provenance)
        if cfg.divergence == "chi2":
            r, g = chi2_rate(ys, ref, cfg.kde)
            energy = float(np.sum(ys.weights * (r - 1.0)))
            if it % cfg.record_every == 0:
                snapshots.append((it, us, ys))
                energies.append((it, energy))
            us = _reweight(us, g, cfg.dt)
            # positions frozen: Y unchanged
        else:
            xi, energy = _transport_driver(ys, ref, cfg)
            if it % cfg.record_every == 0:
                snapshots.append((it, us, ys))
                energies.append((it, energy))
            us = _move(us, fwd, xi, cfg.dt)
            Y = fwd.apply_many(us.particles)
    ys = ParticleEnsemble(Y, us.weights, us.seed_provenance)
    if cfg.divergence == "chi2":
        r, _ = chi2_rate(ys, ref, cfg.kde)
        energy = float(np.sum(ys.weights * (r - 1.0)))
    else:
        _, energy = _transport_driver(ys, ref, cfg)
    snapshots.append((cfg.n_iters, us, ys))
    energies.append((cfg.n_iters, energy))
    return FlowTrajectory(snapshots, energies, cfg)


def projected_langevin_step(ys, map_, ref, dt, rng):
    """Euler-Maruyama step of dy = -A A^T grad f dt + sqrt(2 A A^T) dW.

    grad f = -score_ref, so the drift is A A^T score_ref(y); the noise is
    V (sqrt(2) S) Z with Z standard normal in the r SVD coordinates, which
    realizes the PSD square root of 2 A A^T.  Components of y orthogonal
    to range(A) are left untouched.
    """
    if dt < 0.0:
        raise ValueError("dt must be >= 0")
    Y = ys.particles
    if Y.shape[1] != map_.out_dim:
        raise ValueError("ensemble dimension must match map output dimension")
    drift = ref.score(Y) @ (map_.A @ map_.A.T)
    z = rng.standard_normal((Y.shape[0], map_.rank))
    noise = (z * (np.sqrt(2.0) * map_.S)) @ map_.V.T
    return ys.with_particles(Y + dt * drift + np.sqrt(dt) * noise)


def deterministic_gd(map_, y_star, u_init, dt, n_iters):
    """Explicit-Euler descent of (1/2)|A u - y*|^2 from a single start point."""
    if not dt < 2.0 / map_.S[0] ** 2:
        raise ValueError("unstable dt: require dt < 2 / sigma_max(A)^2")
    y_star = np.asarray(y_star, dtype=np.float64).reshape(-1)
    u = np.asarray(u_init, dtype=np.float64).reshape(-1).copy()
    for _ in range(n_iters):
        u -= dt * (map_.A.T @ (map_.A @ u - y_star))
    return u


def deterministic_gd_limit(map_, y_star, u_init):
    """Closed-form GD limit U S^{-1} V^T y* + (I - U U^T) u_init.

    Valid for n <= m (square or under-determined); the descent then
    converges to the least-squares solution shifted by the preserved
    null-space component of the initial iterate.
    """
    if map_.out_dim > map_.in_dim:
        raise ValueError("limit formula requires n <= m")
    y_star = np.asarray(y_star, dtype=np.float64).reshape(-1)
    u_init = np.asarray(u_init, dtype=np.float64).reshape(-1)
    u_ls = map_.U @ ((map_.V.T @ y_star) / map_.S)
    return u_ls + u_init - map_.U @ (map_.U.T @ u_init)
