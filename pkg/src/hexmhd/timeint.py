"""Explicit SSPRK3 time stepping over the full prognostic bundle.

- Shu-Osher stages applied to the coefficient vectors of every field,
  the vector potential included, all fed by one shared RHS evaluator
- a fixed-step run loop that fires diagnostics and snapshot sinks at
  configured step cadences and always on the final step
- invariant re-checks (positivity, solenoidal div-form coefficients)
  after every accepted step; violations abort with the step index
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mhd


@dataclass
class StepperConfig:
    """Fixed-step run parameters; cadences count steps, not time."""

    dt: float
    t_max: float
    diag_every: int = 1
    output_every: int = 1
    cg_tol: float = 1e-12

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if self.t_max < 0.0:
            raise ValueError("t_max cannot be negative")
        if self.diag_every < 1 or self.output_every < 1:
            raise ValueError("sink cadences must be at least 1 step")
        if not self.cg_tol > 0.0:
            raise ValueError("cg_tol must be positive")

    @property
    def num_steps(self):
        # ceil with a guard against 10/0.025 style binary dust
        return int(np.ceil(self.t_max / self.dt - 1e-9)) if self.t_max > 0 else 0


def ssprk3_vector(y, dt, f):
    """One Shu-Osher SSPRK3 update of the array ODE y' = f(y).

    The state stepper routes through this, so the scalar oracle and the
    field update share the exact same coefficients.
    """
    u1 = y + dt * f(y)
    u2 = 0.75 * y + 0.25 * (u1 + dt * f(u1))
    return y / 3.0 + 2.0 / 3.0 * (u2 + dt * f(u2))


def _pack(state):
    return np.concatenate([state.field(nm).data for nm in state.field_names()])


def _unpack(state, vec):
    lo = 0
    for nm in state.field_names():
        data = state.field(nm).data
        hi = lo + data.size
        data[:] = vec[lo:hi]
        lo = hi


def ssprk3_step(state, dt, rhs):
    """Advance one step; returns a fresh validated state at t + dt."""
    work = state.copy()

    def f(vec):
        _unpack(work, vec)
        b = rhs.rates(work)
        return np.concatenate(
            (b.ndot, b.vdot, b.thermal_dot, b.bdot, b.adot)
        )

    out = state.copy()
    _unpack(out, ssprk3_vector(_pack(state), dt, f))
    out.t = state.t + dt
    out.validate()
    return out


def run(state, formulation, config, diag_sink=None, snapshot_sink=None):
    """Fixed-step loop: ceil(t_max/dt) steps from the initial state.

    Sinks are callables taking (step index, state); the diagnostics sink
    fires at step 0, at its cadence, and on the final step.  A fresh
    evaluator is built per run so the supg history starts from zero.
    """
    rhs = mhd.MhdRhs(formulation, state.mesh, state.degree, cg_tol=config.cg_tol)
    state = state.copy()
    state.validate()
    n_steps = config.num_steps
    t0 = state.t

    def fire(step):
        due = step % config.diag_every == 0 or step == n_steps
        if diag_sink is not None and due:
            diag_sink(step, state)
        due = step % config.output_every == 0 or step == n_steps
        if snapshot_sink is not None and due:
            snapshot_sink(step, state)

    fire(0)
    for step in range(n_steps):
        try:
            state = ssprk3_step(state, config.dt, rhs)
        except ValueError as exc:
            raise ValueError(f"time step {step + 1} aborted: {exc}") from exc
        # pin the clock to the step count so long runs read cleanly
        state.t = t0 + (step + 1) * config.dt
        fire(step + 1)
    return state
