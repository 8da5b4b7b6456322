"""Deterministic full-batch fitting of the ranking/binary/MLE objectives.

The fit loop is plain gradient ascent with a backtracking line search:
halve the step until it clears a sufficient-increase bar, grow it 1.1x on
success. Acceptance demands strict improvement, so the trace is
nondecreasing by construction and a tolerance below the float-noise floor
ends in an explicit stall report instead of a limit cycle. Desk-scale
problems fit in memory, so there is no stochasticity to average away and
identical (config, inputs) produce bit-identical reports. A minibatch
loop exists for the language-model experiment only.

Binary fits append gamma as the last coordinate and clamp it to the
configured interval after every step (the maximizer is assumed interior;
the default [-30, 30] spans any desk-scale partition function).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import InitializationError, ValidationError
from .model import ConditionalProblem, ScoringFunction
from .objectives import (
    BinaryParams,
    RegularizerConfig,
    binary_gradient,
    binary_objective,
    mle_gradient,
    mle_objective,
    population_binary_gradient,
    population_binary_objective,
    population_ranking_gradient,
    population_ranking_objective,
    ranking_gradient,
    ranking_objective,
    regularizer,
)
from .sampling import (
    Dataset,
    NoiseDistribution,
    SamplingConfig,
    derive_rng,
    sample_negatives,
)

OBJECTIVES = ("ranking", "binary", "mle", "population-ranking", "population-binary")
_MIN_STEP = 1e-18
_ARMIJO = 1e-4


@dataclass(frozen=True)
class FitConfig:
    objective: str
    k: int = 1
    reg: RegularizerConfig | None = None
    max_iters: int = 5000
    step_size: float = 1.0
    tol: float = 1e-7
    gamma_range: tuple[float, float] = (-30.0, 30.0)
    init: str = "zeros"
    init_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValidationError(
                f"objective must be one of {OBJECTIVES}, got '{self.objective}'"
            )
        if self.tol <= 0:
            raise ValidationError(f"tol must be > 0, got {self.tol}")
        if self.max_iters < 1:
            raise ValidationError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.gamma_range[0] < self.gamma_range[1]:
            raise ValidationError(f"bad gamma range {self.gamma_range}")
        if self.init not in ("zeros", "gaussian"):
            raise ValidationError(f"init must be 'zeros' or 'gaussian', got '{self.init}'")

    def digest(self) -> str:
        payload = {k: v for k, v in self.__dict__.items() if k != "reg"}
        if self.reg is not None:
            payload["reg"] = self.reg.__dict__
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True, default=str).encode()
        ).hexdigest()[:16]


@dataclass
class EstimationReport:
    objective_tag: str
    theta: np.ndarray
    gamma: float | None
    final_objective: float
    grad_norm: float
    iterations: int
    converged: bool
    stalled: bool
    message: str
    trace: list[tuple[int, float]]
    trace_detail: list[tuple[int, float, float, float]]
    config_digest: str
    data_digest: str

    def to_json_dict(self) -> dict:
        return {
            "objective": self.objective_tag,
            "theta": self.theta.tolist(),
            "gamma": self.gamma,
            "final_objective": self.final_objective,
            "grad_norm": self.grad_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "stalled": self.stalled,
            "message": self.message,
            "trace": [[int(i), float(v)] for i, v in self.trace],
            "config_digest": self.config_digest,
            "data_digest": self.data_digest,
        }

    def write_trace_csv(self, path: str, comment: str | None = None) -> None:
        with open(path, "w", encoding="utf-8") as f:
            if comment:
                f.write(f"# {comment}\n")
            f.write("iter,objective,grad_norm,step\n")
            for i, v, g, s in self.trace_detail:
                f.write(f"{i},{v!r},{g!r},{s!r}\n")


def _binary_tag(objective: str) -> bool:
    return objective in ("binary", "population-binary")


def _make_value_grad(sf, data, noise, cfg):
    """Closure params -> (value, grad) for the configured objective."""
    is_population = cfg.objective.startswith("population-")
    if is_population and not isinstance(data, ConditionalProblem):
        raise ValidationError(f"objective '{cfg.objective}' needs a ConditionalProblem")
    if not is_population and not isinstance(data, Dataset):
        raise ValidationError(f"objective '{cfg.objective}' needs a Dataset")
    if cfg.objective in ("ranking", "binary") and noise is None:
        raise ValidationError(f"objective '{cfg.objective}' needs a noise distribution")

    if cfg.objective == "mle":
        def value_grad(params):
            return mle_objective(sf, params, data), mle_gradient(sf, params, data)
    elif cfg.objective == "ranking":
        def value_grad(params):
            return (
                ranking_objective(sf, params, data, noise),
                ranking_gradient(sf, params, data, noise),
            )
    elif cfg.objective == "binary":
        def value_grad(params):
            bp = BinaryParams(params[:-1], float(params[-1]))
            return (
                binary_objective(sf, bp, data, noise),
                binary_gradient(sf, bp, data, noise),
            )
    elif cfg.objective == "population-ranking":
        def value_grad(params):
            return (
                population_ranking_objective(sf, params, data, noise, cfg.k, mode="exact"),
                population_ranking_gradient(sf, params, data, noise, cfg.k),
            )
    else:  # population-binary
        def value_grad(params):
            bp = BinaryParams(params[:-1], float(params[-1]))
            return (
                population_binary_objective(sf, bp, data, noise, cfg.k),
                population_binary_gradient(sf, bp, data, noise, cfg.k),
            )

    if cfg.reg is not None and cfg.reg.alpha > 0.0:
        if is_population:
            raise ValidationError("the sampled regularizer needs a Dataset objective")
        base = value_grad
        has_gamma = _binary_tag(cfg.objective)

        def value_grad(params):
            value, grad = base(params)
            theta = params[:-1] if has_gamma else params
            reg_value, reg_grad = regularizer(sf, theta, data, noise, cfg.reg)
            if has_gamma:
                reg_grad = np.concatenate([reg_grad, [0.0]])
            return value - reg_value, grad - reg_grad

    return value_grad


def _initial_params(sf, cfg):
    dim = sf.n_params + (1 if _binary_tag(cfg.objective) else 0)
    if cfg.init == "zeros":
        params = np.zeros(dim)
    else:
        rng = derive_rng(cfg.seed, 5)
        params = cfg.init_sigma * rng.standard_normal(dim)
    if _binary_tag(cfg.objective):
        params[-1] = np.clip(params[-1], *cfg.gamma_range)
    return params


def _clamp_gamma(params, cfg):
    if _binary_tag(cfg.objective):
        params[-1] = np.clip(params[-1], *cfg.gamma_range)
    return params


def fit(
    sf: ScoringFunction,
    data,
    noise: NoiseDistribution | None,
    cfg: FitConfig,
    callback=None,
) -> EstimationReport:
    """Maximize the configured objective; deterministic in (cfg, inputs).

    ``data`` is a Dataset for the sampled objectives and a
    ConditionalProblem for the population ones. ``callback(iteration,
    params)``, if given, runs after every accepted step (it must not
    mutate params).
    """
    value_grad = _make_value_grad(sf, data, noise, cfg)
    params = _initial_params(sf, cfg)
    value, grad = value_grad(params)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise InitializationError(
            f"objective non-finite at the initial point (value={value!r})"
        )
    step = cfg.step_size
    trace = [(0, value)]
    grad_norm = float(np.linalg.norm(grad))
    trace_detail = [(0, value, grad_norm, step)]
    stalled = False
    message = ""
    iterations = 0
    for iteration in range(1, cfg.max_iters + 1):
        if grad_norm <= cfg.tol:
            break
        while True:
            candidate = _clamp_gamma(params + step * grad, cfg)
            new_value, new_grad = value_grad(candidate)
            # sufficient strict increase keeps the trace nondecreasing and
            # rules out limit cycles of slack-accepted downhill steps; once
            # improvements sink below float noise the search stalls loudly
            if (
                np.isfinite(new_value)
                and new_value > value
                and new_value >= value + _ARMIJO * step * grad_norm**2
            ):
                break
            step *= 0.5
            if step < _MIN_STEP:
                stalled = True
                message = (
                    f"line search stalled at iteration {iteration}: "
                    f"step {step:.3e} < {_MIN_STEP}, grad_norm {grad_norm:.3e}, "
                    f"objective {value!r}"
                )
                break
        if stalled:
            break
        params, value, grad = candidate, new_value, new_grad
        grad_norm = float(np.linalg.norm(grad))
        accepted_step = step
        step *= 1.1
        iterations = iteration
        trace.append((iteration, value))
        trace_detail.append((iteration, value, grad_norm, accepted_step))
        if callback is not None:
            callback(iteration, params)
    converged = grad_norm <= cfg.tol
    if _binary_tag(cfg.objective):
        theta, gamma = params[:-1].copy(), float(params[-1])
    else:
        theta, gamma = params.copy(), None
    data_digest = data.digest() if isinstance(data, Dataset) else _problem_digest(data)
    return EstimationReport(
        objective_tag=cfg.objective,
        theta=theta,
        gamma=gamma,
        final_objective=value,
        grad_norm=grad_norm,
        iterations=iterations,
        converged=converged,
        stalled=stalled,
        message=message,
        trace=trace,
        trace_detail=trace_detail,
        config_digest=cfg.digest(),
        data_digest=data_digest,
    )


def _problem_digest(problem: ConditionalProblem) -> str:
    h = hashlib.sha256()
    h.update(problem.p_x.tobytes())
    h.update(problem.p_y_given_x.tobytes())
    return h.hexdigest()[:16]


def fit_with_restarts(
    sf: ScoringFunction,
    data,
    noise: NoiseDistribution | None,
    cfg: FitConfig,
    restarts: int,
) -> EstimationReport:
    """Best of ``restarts`` fits; restart 0 is the plain fit, the rest use
    seeded-Gaussian inits with derived seeds."""
    if restarts < 1:
        raise ValidationError(f"restarts must be >= 1, got {restarts}")
    best: EstimationReport | None = None
    errors: list[str] = []
    for r in range(restarts):
        run_cfg = cfg if r == 0 else replace(cfg, init="gaussian", seed=cfg.seed + 1 + r)
        try:
            report = fit(sf, data, noise, run_cfg)
        except InitializationError as exc:
            errors.append(f"restart {r}: {exc}")
            continue
        if best is None or report.final_objective > best.final_objective:
            best = report
    if best is None:
        raise InitializationError("all restarts failed: " + "; ".join(errors))
    return best


def fit_minibatch(
    sf: ScoringFunction,
    dataset: Dataset,
    noise: NoiseDistribution | None,
    cfg: FitConfig,
    batch_size: int,
    epochs: int,
    step_size: float | None = None,
    resample_negatives: bool = False,
) -> EstimationReport:
    """Epoch-based minibatch ascent for the LM experiment.

    Shuffling is fixed by (cfg.seed, epoch); the step size decays as
    1/sqrt(epoch). Negatives may optionally be redrawn each epoch. The
    trace records the full objective once per epoch.
    """
    if cfg.objective not in ("ranking", "binary", "mle"):
        raise ValidationError("minibatch mode supports the sampled objectives only")
    if batch_size < 1 or epochs < 1:
        raise ValidationError("batch_size and epochs must be >= 1")
    base_step = cfg.step_size if step_size is None else step_size
    params = _initial_params(sf, cfg)
    epoch_data = dataset
    trace = []
    value = float("nan")
    for epoch in range(epochs):
        if resample_negatives and epoch > 0:
            scfg = SamplingConfig(k=dataset.k, seed=cfg.seed, stream=1000 + epoch)
            epoch_data = Dataset(
                x=dataset.x,
                y=dataset.y,
                negatives=sample_negatives(scfg, noise, dataset.n),
                provenance={**dataset.provenance, "resampled_epoch": epoch},
            )
        reg = cfg.reg
        if reg is not None and reg.alpha > 0.0:
            reg = replace(reg, stream=reg.stream + epoch)
        epoch_cfg = replace(cfg, reg=reg)
        order = derive_rng(cfg.seed, 6, epoch).permutation(epoch_data.n)
        step = base_step / np.sqrt(1.0 + epoch)
        for start in range(0, epoch_data.n, batch_size):
            idx = order[start : start + batch_size]
            batch = Dataset(
                x=epoch_data.x[idx],
                y=epoch_data.y[idx],
                negatives=epoch_data.negatives[idx],
                provenance=epoch_data.provenance,
            )
            _, grad = _make_value_grad(sf, batch, noise, epoch_cfg)(params)
            params = _clamp_gamma(params + step * grad, cfg)
        value, grad = _make_value_grad(sf, epoch_data, noise, epoch_cfg)(params)
        trace.append((epoch + 1, value))
    grad_norm = float(np.linalg.norm(grad))
    if _binary_tag(cfg.objective):
        theta, gamma = params[:-1].copy(), float(params[-1])
    else:
        theta, gamma = params.copy(), None
    return EstimationReport(
        objective_tag=cfg.objective,
        theta=theta,
        gamma=gamma,
        final_objective=value,
        grad_norm=grad_norm,
        iterations=epochs,
        converged=grad_norm <= cfg.tol,
        stalled=False,
        message="minibatch",
        trace=trace,
        trace_detail=[(e, v, float("nan"), base_step / np.sqrt(e)) for e, v in trace],
        config_digest=cfg.digest(),
        data_digest=dataset.digest(),
    )
