"""Scaled Euler-Maruyama simulation of the fast process and its functionals.

The process is stepped in rescaled form: over a grid step of width
``delta_step`` the update is

    Z(t_{k+1}) = Z(t_k) + b(Z(t_k)) * h + sigma(Z(t_k)) * sqrt(h) * xi_k

with ``h = delta_step / epsilon`` and i.i.d. standard normal ``xi_k``.
Path functionals (running integral of f along the path, and its
left-endpoint Riemann variant) are accumulated online; full trajectories
are never stored.

Randomness is organized as counter-based per-replicate streams derived
from ``(master_seed, replicate_index)`` so that replicate results do not
depend on execution order, chunking, or thread count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .models import FunctionalSpec, SdeModel
from .quadrature import integrate


class SimulationError(Exception):
    pass


class TrajectoryExplodedError(SimulationError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(
            f"trajectory exploded at step {step} (|Z| = {value:.3g}); "
            "the step schedule is too coarse for this drift"
        )


class ScheduleError(ValueError):
    pass


LLN = "LLN"
CLT = "CLT"
MDP = "MDP"


@dataclass(frozen=True)
class SchedulePolicy:
    """Power-law coupling Delta(eps) = c_step * eps^theta, delta(eps) = eps^gamma_mdp."""

    theta_step: float
    c_step: float = 1.0
    gamma_mdp: Optional[float] = None


@dataclass(frozen=True)
class StepSchedule:
    """The (epsilon, Delta(eps), delta(eps)) triple for one scaling regime."""

    epsilon: float
    delta_step: float
    mdp_scale: float
    regime: str
    policy: SchedulePolicy

    @classmethod
    def from_policy(
        cls, epsilon: float, regime: str, policy: SchedulePolicy, holder_nu: float
    ) -> "StepSchedule":
        if epsilon <= 0:
            raise ScheduleError(f"epsilon must be positive, got {epsilon}")
        if holder_nu <= 0:
            raise ScheduleError("holder_nu must be > 0; no valid step schedule exists otherwise")
        theta = policy.theta_step
        if regime == LLN:
            if theta <= 1.0:
                raise ScheduleError(f"LLN requires theta > 1, got {theta}")
            scale = 1.0
        elif regime in (CLT, MDP):
            bound = 1.0 + 1.0 / holder_nu
            if theta <= bound:
                raise ScheduleError(
                    f"{regime} requires theta > 1 + 1/nu = {bound}, got {theta}"
                )
            if regime == CLT:
                scale = math.sqrt(epsilon)
            else:
                g = policy.gamma_mdp
                if g is None or not (0.0 < g < 0.5):
                    raise ScheduleError(
                        f"MDP requires 0 < gamma_mdp < 1/2, got {g}"
                    )
                scale = epsilon**g
        else:
            raise ScheduleError(f"unknown regime {regime!r}")
        return cls(
            epsilon=epsilon,
            delta_step=policy.c_step * epsilon**theta,
            mdp_scale=scale,
            regime=regime,
            policy=policy,
        )

    @property
    def beta(self) -> float:
        """MDP speed eps / delta(eps)^2."""
        return self.epsilon / self.mdp_scale**2

    @property
    def h(self) -> float:
        """Rescaled step Delta / eps used in the update rule."""
        return self.delta_step / self.epsilon

    def n_steps(self, horizon: float) -> int:
        # horizon snapped down to the grid; the truncation is reported upstream
        return int(math.floor(horizon / self.delta_step + 1e-9))


def grid_floor(t: float, delta: float) -> float:
    """Largest grid point k*delta <= t; exact on grid points."""
    if t < 0 or delta <= 0:
        raise ValueError("require t >= 0 and delta > 0")
    q = t / delta
    k = math.floor(q)
    if q - k > 1.0 - 1e-9:
        k += 1
    kd = k * delta
    if abs(kd - t) <= 1e-12 * delta:
        return t
    return kd


@dataclass(frozen=True)
class ControlFunction:
    """A deterministic control path psi(t) with an L2 budget over [0, horizon]."""

    psi: Callable[[float], float]
    l2_bound: float
    horizon: float

    def __post_init__(self):
        cost = integrate(lambda s: float(np.sum(np.square(self.psi(s)))), 0.0, self.horizon,
                         tol=1e-10)
        if cost > self.l2_bound + 1e-8:
            raise ValueError(
                f"control L2 norm^2 {cost:.6g} exceeds declared bound {self.l2_bound:.6g}"
            )


@dataclass
class FunctionalAccumulator:
    """Online state of the path functionals at the current grid time."""

    xi_continuous: np.ndarray
    xi_riemann: np.ndarray
    sup_norm_seen: float
    t_current: float


def replicate_stream(master_seed: int, replicate_index: int) -> np.random.Generator:
    """Counter-based stream for one replicate, independent of execution order."""
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(replicate_index,))
    return np.random.Generator(np.random.Philox(seq))


def _sim_coeffs(model: SdeModel):
    """Coefficients and state map in the coordinates actually stepped."""
    if model.sim_drift is not None:
        return model.sim_drift, model.sim_diffusion, model.state_map, model.sim_initial_state
    return model.drift, model.diffusion, None, model.initial_state


def simulate_euler(
    model: SdeModel,
    schedule: StepSchedule,
    f: FunctionalSpec,
    horizon: float,
    rng: np.random.Generator,
    blow_up: float = 1e8,
    snapshot_stride: int = 0,
    snapshot_path: Optional[str] = None,
    noise: Optional[np.ndarray] = None,
    control: Optional[ControlFunction] = None,
) -> FunctionalAccumulator:
    """Single-path Euler simulation; returns the final accumulator state.

    ``noise`` optionally injects the per-step standard normal increments
    (shape (n_steps, dim_noise)), which is how coupled-refinement
    convergence checks share a Brownian path.
    """
    drift, diffusion, state_map, x0 = _sim_coeffs(model)
    h = schedule.h
    sqrt_h = math.sqrt(h)
    dt = schedule.delta_step
    n_steps = schedule.n_steps(horizon)
    ctrl_coef = schedule.mdp_scale / schedule.epsilon * dt if control is not None else 0.0

    z = np.array(x0, dtype=float)
    scalar = model.dim_state == 1

    def observe(t, state):
        x = state_map(state) if state_map is not None else state
        return np.atleast_1d(np.asarray(f.value(t, x[0] if scalar else x), dtype=float))

    f_prev = observe(0.0, z)
    xi_c = np.zeros_like(f_prev)
    xi_r = np.zeros_like(f_prev)
    sup = 0.0

    rows = []
    if snapshot_stride:
        rows.append((0.0, z.copy(), xi_c.copy()))

    for k in range(n_steps):
        t_k = k * dt
        xi_r = xi_r + f_prev * dt
        if noise is not None:
            xi_k = np.atleast_1d(noise[k])
        else:
            xi_k = rng.standard_normal(model.dim_noise)
        b = np.atleast_1d(np.asarray(drift(z[0] if scalar else z), dtype=float))
        s = np.asarray(diffusion(z[0] if scalar else z), dtype=float)
        if scalar:
            z = z + h * b + sqrt_h * float(s) * xi_k[:1]
        else:
            z = z + h * b + sqrt_h * (np.atleast_2d(s) @ xi_k)
        if control is not None:
            z = z + ctrl_coef * (float(s) * np.atleast_1d(control.psi(t_k)) if scalar
                                 else np.atleast_2d(s) @ np.atleast_1d(control.psi(t_k)))
        if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > blow_up:
            raise TrajectoryExplodedError(k + 1, float(np.max(np.abs(z))))
        f_new = observe(t_k + dt, z)
        xi_c = xi_c + 0.5 * (f_prev + f_new) * dt
        sup = max(sup, float(np.linalg.norm(xi_c)))
        f_prev = f_new
        if snapshot_stride and (k + 1) % snapshot_stride == 0:
            rows.append(((k + 1) * dt, z.copy(), xi_c.copy()))

    if snapshot_stride and snapshot_path:
        _write_snapshots(snapshot_path, rows, model.dim_state, len(xi_c), state_map)
    return FunctionalAccumulator(
        xi_continuous=xi_c, xi_riemann=xi_r, sup_norm_seen=sup, t_current=n_steps * dt
    )


def _write_snapshots(path, rows, d, n, state_map):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"z_{i+1}" for i in range(d)] + [f"xi_{i+1}" for i in range(n)])
        for t, z, xi in rows:
            x = state_map(z) if state_map is not None else z
            w.writerow([f"{t:.12g}"] + [f"{v:.17g}" for v in x] + [f"{v:.17g}" for v in xi])


def simulate_controlled(
    model: SdeModel,
    schedule: StepSchedule,
    psi: ControlFunction,
    f: FunctionalSpec,
    horizon: float,
    rng: np.random.Generator,
    **kw,
) -> FunctionalAccumulator:
    """Euler simulation with the tilt drift (delta/eps) sigma psi(t) added per step.

    With psi identically zero the path coincides bitwise with
    :func:`simulate_euler` under the same stream.
    """
    if schedule.regime != MDP:
        raise ScheduleError("controlled simulation requires an MDP schedule")
    return simulate_euler(model, schedule, f, horizon, rng, control=psi, **kw)


def simulate_reference(
    model: SdeModel,
    epsilon: float,
    fine_factor: int,
    f: FunctionalSpec,
    horizon: float,
    rng: np.random.Generator,
    base_delta: Optional[float] = None,
    **kw,
) -> FunctionalAccumulator:
    """Fine-grid Euler proxy for the undiscretized fast process.

    The reference step is the working step divided by ``fine_factor``
    (>= 10), so the same machinery doubles as an approximation of the
    continuous-time functional.
    """
    if fine_factor < 10:
        raise ValueError("fine_factor must be >= 10")
    delta = (base_delta if base_delta is not None else epsilon**2) / fine_factor
    sched = StepSchedule(
        epsilon=epsilon,
        delta_step=delta,
        mdp_scale=1.0,
        regime=LLN,
        policy=SchedulePolicy(theta_step=2.0),
    )
    return simulate_euler(model, sched, f, horizon, rng, **kw)


# ---------------------------------------------------------------------------
# batched replicate kernel (1D fast path used by the harness)
# ---------------------------------------------------------------------------

_CHUNK = 4096  # fixed so results never depend on thread count
_NOISE_BUDGET = 8_000_000  # floats per in-flight noise block


@dataclass
class BatchResult:
    xi_continuous: np.ndarray  # (N,)
    xi_riemann: np.ndarray
    sup_abs: np.ndarray
    terminal: np.ndarray
    failed: np.ndarray  # bool
    fail_step: np.ndarray  # int, -1 where ok

    @classmethod
    def _concat(cls, parts: Sequence["BatchResult"]) -> "BatchResult":
        return cls(*[np.concatenate([getattr(p, f.name) for p in parts])
                     for f in cls.__dataclass_fields__.values()])  # type: ignore[arg-type]


def simulate_batch(
    model: SdeModel,
    schedule: StepSchedule,
    f: FunctionalSpec,
    horizon: float,
    master_seed: int,
    n_replicates: int,
    threads: int = 1,
    blow_up: float = 1e8,
    control: Optional[ControlFunction] = None,
    first_index: int = 0,
) -> BatchResult:
    """Run ``n_replicates`` independent 1D paths with per-replicate streams.

    Replicates are processed in fixed-size chunks; chunks may execute on a
    thread pool but are merged by index, so the output is a deterministic
    function of (model, schedule, f, horizon, master_seed, n_replicates).
    """
    if model.dim_state != 1 or model.dim_noise != 1:
        raise SimulationError("simulate_batch supports 1D models; use simulate_euler otherwise")
    if f.n_components != 1:
        raise SimulationError("simulate_batch supports scalar functionals")
    if control is not None and schedule.regime != MDP:
        raise ScheduleError("controlled simulation requires an MDP schedule")
    chunks = [
        (first_index + i, min(_CHUNK, n_replicates - i))
        for i in range(0, n_replicates, _CHUNK)
    ]
    args = (model, schedule, f, horizon, master_seed, blow_up, control)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda c: _simulate_chunk(*args, *c), chunks))
    else:
        parts = [_simulate_chunk(*args, *c) for c in chunks]
    return BatchResult._concat(parts)


def _simulate_chunk(model, schedule, f, horizon, master_seed, blow_up, control,
                    start_index, n):
    drift, diffusion, state_map, x0 = _sim_coeffs(model)
    h = schedule.h
    sqrt_h = math.sqrt(h)
    dt = schedule.delta_step
    n_steps = schedule.n_steps(horizon)
    ctrl_coef = schedule.mdp_scale / schedule.epsilon * dt if control is not None else 0.0
    gens = [replicate_stream(master_seed, start_index + i) for i in range(n)]

    z = np.full(n, float(x0[0]))
    observe = (lambda t, s: np.asarray(f.value(t, state_map(s)), dtype=float)) \
        if state_map is not None else (lambda t, s: np.asarray(f.value(t, s), dtype=float))
    f_prev = observe(0.0, z)
    xi_c = np.zeros(n)
    xi_r = np.zeros(n)
    sup = np.zeros(n)
    failed = np.zeros(n, dtype=bool)
    fail_step = np.full(n, -1, dtype=np.int64)

    block = max(1, min(n_steps, _NOISE_BUDGET // max(n, 1)))
    noise = np.empty((n, block))
    done = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while done < n_steps:
            kblk = min(block, n_steps - done)
            for j, g in enumerate(gens):
                noise[j, :kblk] = g.standard_normal(kblk)
            for k in range(kblk):
                t_k = (done + k) * dt
                xi_r += f_prev * dt
                b = drift(z)
                s = diffusion(z)
                z = z + h * b + sqrt_h * s * noise[:, k]
                if control is not None:
                    z = z + (ctrl_coef * float(np.asarray(control.psi(t_k)))) * s
                f_new = observe(t_k + dt, z)
                xi_c += 0.5 * (f_prev + f_new) * dt
                np.maximum(sup, np.abs(xi_c), out=sup)
                f_prev = f_new
            bad = ~np.isfinite(z) | (np.abs(z) > blow_up)
            newly = bad & ~failed
            if np.any(newly):
                failed |= newly
                fail_step[newly] = done + kblk
                z = np.where(failed, float(x0[0]), z)
                xi_c = np.where(failed, np.nan, xi_c)
                xi_r = np.where(failed, np.nan, xi_r)
                f_prev = observe((done + kblk) * dt, z)
            done += kblk
    terminal = state_map(z) if state_map is not None else z
    return BatchResult(xi_c, xi_r, sup, terminal, failed, fail_step)
