"""Gradient evaluation and the optimization loop.

An objective exposes ``param_groups()`` and ``loss(naturals) -> Node``; the
fit loop owns a ParamVector of unconstrained values, differentiates the loss
through each group's constraint transform, and applies per-group Adam (or
plain gradient descent) updates. Warm-up steps move only dependence
parameters while the warp stays at its initialization.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NumericalError, WarpstatError
from .params import LearnRates, ParamVector

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class FitConfig:
    """Optimizer settings: warm-up and main step counts, method, seed."""

    nsteps: int = 100
    nsteps_pre: int = 0
    optimizer: str = "adam"
    seed: int = 0
    tolerance: float = 0.0          # early stop on loss stagnation; 0 = off
    log_every: int = 1

    def __post_init__(self):
        if self.nsteps < 0 or self.nsteps_pre < 0:
            raise ValueError("step counts must be nonnegative")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class AdamState:
    """First/second moment accumulators per parameter group."""

    def __init__(self, shapes):
        self.m = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.v = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.t = 0


def adam_step(state, values, grads, rates, active=None):
    """One Adam update over named groups; returns the new value dict.

    rates maps group name to learning rate; groups with zero rate or outside
    ``active`` keep their values (their moments do not accumulate either).
    """
    state.t += 1
    t = state.t
    out = {}
    for name, u in values.items():
        g = grads[name]
        rate = rates[name]
        if (active is not None and name not in active) or rate == 0.0:
            out[name] = u.copy()
            continue
        m = state.m[name] = ADAM_BETA1 * state.m[name] + (1 - ADAM_BETA1) * g
        v = state.v[name] = ADAM_BETA2 * state.v[name] + (1 - ADAM_BETA2) * g**2
        mhat = m / (1 - ADAM_BETA1**t)
        vhat = v / (1 - ADAM_BETA2**t)
        out[name] = u - rate * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return out


def gd_step(values, grads, rates, active=None):
    out = {}
    for name, u in values.items():
        rate = rates[name]
        if (active is not None and name not in active) or rate == 0.0:
            out[name] = u.copy()
        else:
            out[name] = u - rate * grads[name]
    return out


def evaluate(objective, pv):
    """Loss value and per-group gradients (unconstrained scale) at pv."""
    leaves = pv.leaf_nodes()
    naturals = pv.natural_nodes(leaves)
    loss = objective.loss(naturals)
    ad.check_finite(loss)
    names = pv.names()
    grads = ad.grad(loss, [leaves[n] for n in names])
    return loss.item(), dict(zip(names, grads))


def grad(objective, pv):
    """Spec-level gradient operation: (value, gradient per group)."""
    return evaluate(objective, pv)


@dataclass
class FitResult:
    params: ParamVector
    trace: list = field(default_factory=list)
    aborted: bool = False
    config: FitConfig = None


def trace_to_csv(trace):
    """Render the loss trace as CSV: step, phase, loss, grad norm per group."""
    if not trace:
        return "step,phase,loss\n"
    names = sorted(trace[0]["grad_norms"])
    buf = io.StringIO()
    buf.write("step,phase,loss," + ",".join(f"gnorm.{n}" for n in names) + "\n")
    for row in trace:
        norms = ",".join(repr(row["grad_norms"][n]) for n in names)
        buf.write(f"{row['step']},{row['phase']},{row['loss']!r},{norms}\n")
    return buf.getvalue()


def fit(objective, config, learn_rates=None):
    """Warm-up then full optimization of the objective.

    Warm-up steps (nsteps_pre) update only dependence-parameter groups, with
    the warp frozen at its initialization; the main phase updates everything.
    Three consecutive failed loss evaluations abort the fit with the trace
    preserved and parameters restored to the last good point.
    """
    if learn_rates is None:
        learn_rates = LearnRates()
    pv = ParamVector(objective.param_groups())
    pv.check_roundtrip()
    rates = {g.name: learn_rates.rate_for(g.rate_key)
             for g in objective.param_groups()}
    dependence_names = {g.name for g in objective.param_groups()
                        if g.role == "dependence"}
    state = AdamState({n: pv.values[n].shape for n in pv.names()})

    trace = []
    result = FitResult(params=pv, trace=trace, config=config)
    failures = 0
    last_good = pv.copy()
    stagnant = 0
    prev_loss = None

    phases = [("warmup", config.nsteps_pre, dependence_names),
              ("main", config.nsteps, None)]
    step_counter = 0
    for phase, nsteps, active in phases:
        for _ in range(nsteps):
            try:
                loss, grads = evaluate(objective, pv)
            except (NumericalError, ad.NonFiniteError, np.linalg.LinAlgError) as exc:
                failures += 1
                if failures >= 3:
                    result.params = last_good
                    result.aborted = True
                    err = NumericalError(
                        f"loss failed {failures} consecutive times at step "
                        f"{step_counter}: {exc}"
                    )
                    err.trace = trace   # the partial loss trace up to the abort
                    raise err from exc
                continue
            failures = 0
            last_good = pv.copy()
            trace.append({
                "step": step_counter,
                "phase": phase,
                "loss": loss,
                "grad_norms": {n: float(np.linalg.norm(g))
                               for n, g in grads.items()},
            })
            if config.optimizer == "adam":
                new_values = adam_step(state, pv.values, grads, rates, active)
            else:
                new_values = gd_step(pv.values, grads, rates, active)
            for name, val in new_values.items():
                if not np.all(np.isfinite(val)):
                    raise NumericalError(f"non-finite update for group {name}")
                pv.values[name] = val
            _assert_natural_domains(pv)
            step_counter += 1
            if config.tolerance > 0 and prev_loss is not None:
                if abs(prev_loss - loss) < config.tolerance * (1 + abs(loss)):
                    stagnant += 1
                    if stagnant >= 5:
                        return result
                else:
                    stagnant = 0
            prev_loss = loss
    return result


def _assert_natural_domains(pv):
    """Every group's natural value must be finite (transforms guarantee the
    domain shape; this guards against numeric blow-ups)."""
    for name in pv.names():
        nat = pv.natural(name)
        if not np.all(np.isfinite(nat)):
            raise NumericalError(f"natural parameters diverged for group {name}")
