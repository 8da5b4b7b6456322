"""Command-line front end: reproducible runs with file-based inputs/outputs.

Every command writes a run manifest next to its outputs; result files are
byte-exact under re-runs with the same arguments (wall-clock lives only in
the manifest). CSV outputs start with a `# manifest=<digest>` comment.

Exit codes: 0 success, 2 validation error, 3 numeric error, 4 budget error.
Logs are natural-log based throughout; perplexity uses the natural
exponent. NCE_LAB_THREADS caps BLAS parallelism for the process.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources

import numpy as np

from .asymptotics import (
    binary_asymptotic_cov,
    fisher_information,
    invert_spd,
    ranking_asymptotic_cov,
    replicate,
)
from .errors import BudgetError, NumericError, ValidationError
from .evaluation import evaluate
from .lm import LmConfig, run_lm_experiment
from .manifest import RunManifest, Stopwatch, write_csv
from .model import ConditionalProblem, ContextBias, cond_prob
from .objectives import RegularizerConfig
from .optimize import FitConfig, fit
from .sampling import (
    NoiseDistribution,
    SamplingConfig,
    counterexample_problem,
    generate_dataset,
    load_dataset_jsonl,
    make_self_normalized_problem,
    make_synthetic_problem,
    random_tabular_problem,
    save_dataset_jsonl,
)

COUNTEREXAMPLE_KS = (1, 2, 5, 10)


def _apply_thread_cap() -> None:
    cap = os.environ.get("NCE_LAB_THREADS")
    if not cap:
        return
    try:
        limit = max(1, int(cap))
    except ValueError:
        raise ValidationError(f"NCE_LAB_THREADS must be an integer, got {cap!r}")
    os.environ.setdefault("OMP_NUM_THREADS", str(limit))
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=limit)
    except ImportError:
        pass


def tabular_noise(problem: ConditionalProblem, spec: str) -> NoiseDistribution:
    """Noise over labels for tabular problems; 'unigram' means the label
    marginal p_Y, optionally raised to a power and renormalized."""
    if spec == "uniform":
        return NoiseDistribution.uniform(problem.m_y)
    if spec == "unigram" or spec.startswith("unigram-pow:"):
        power = 1.0
        if spec.startswith("unigram-pow:"):
            try:
                power = float(spec.split(":", 1)[1])
            except ValueError as exc:
                raise ValidationError(f"bad noise spec '{spec}'") from exc
        marginal = problem.p_x @ problem.p_y_given_x
        weights = marginal**power
        return NoiseDistribution(weights / weights.sum())
    raise ValidationError(f"unknown noise spec '{spec}'")


def _parse_gamma_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(part) for part in text.split(":"))
    except ValueError as exc:
        raise ValidationError(f"--gamma-range expects 'lo:hi', got {text!r}") from exc
    return lo, hi


def _parse_mode(text: str) -> tuple[str, int | None]:
    if text == "exact":
        return "exact", None
    if text.startswith("mc:"):
        try:
            return "mc", int(text.split(":", 1)[1])
        except ValueError as exc:
            raise ValidationError(f"--mode expects 'exact' or 'mc:<M>', got {text!r}") from exc
    raise ValidationError(f"--mode expects 'exact' or 'mc:<M>', got {text!r}")


def _manifest(args: argparse.Namespace, command: str) -> RunManifest:
    recorded = {
        k: v for k, v in vars(args).items() if k not in ("func",) and v is not None
    }
    return RunManifest(command=command, arguments=recorded, seed=int(getattr(args, "seed", 0)))


def _out_base(path: str) -> str:
    root, ext = os.path.splitext(path)
    return root if ext else path


def cmd_synth(args) -> int:
    manifest = _manifest(args, "synth")
    with Stopwatch() as watch:
        if args.kind == "softmax":
            problem = make_synthetic_problem(args.d, args.m_x, args.m_y, args.seed)
        elif args.kind == "self-normalized":
            problem = make_self_normalized_problem(args.m_x, args.m_y, args.d, args.seed)
        else:
            problem = random_tabular_problem(args.m_x, args.m_y, args.d, args.seed)
        problem.save(args.out)
    manifest.output_paths = [args.out]
    manifest.wall_clock_seconds = watch.elapsed
    manifest.write(_out_base(args.out) + ".manifest.json")
    print(f"wrote {args.kind} problem ({args.m_x} x {args.m_y}, d={args.d}) to {args.out}")
    return 0


def _load_problem(args, manifest: RunManifest) -> ConditionalProblem:
    if args.problem is None:
        raise ValidationError("--problem is required")
    manifest.add_input("problem", args.problem)
    return ConditionalProblem.load(args.problem)


def cmd_fit(args) -> int:
    manifest = _manifest(args, "fit")
    with Stopwatch() as watch:
        problem = _load_problem(args, manifest)
        if problem.scoring is None:
            raise ValidationError("problem file carries no scoring function to fit")
        noise = tabular_noise(problem, args.noise)
        if args.dataset is not None:
            manifest.add_input("dataset", args.dataset)
            dataset = load_dataset_jsonl(args.dataset)
            dataset.check_bounds(problem.m_x, problem.m_y)
        else:
            dataset = generate_dataset(
                problem, args.n, SamplingConfig(k=args.K, seed=args.seed), noise
            )
        sf = ContextBias(problem.scoring) if args.context_bias else problem.scoring
        reg = None
        if args.reg_alpha > 0:
            reg = RegularizerConfig(
                alpha=args.reg_alpha, m=args.reg_m, seed=args.seed, stream=3
            )
        cfg = FitConfig(
            objective=args.estimator,
            k=args.K,
            reg=reg,
            max_iters=args.max_iters,
            tol=args.tol,
            gamma_range=_parse_gamma_range(args.gamma_range),
            seed=args.seed,
        )
        report = fit(sf, dataset, noise, cfg)
        metrics = evaluate(problem, sf, report.theta)
        digest = manifest.digest()
        payload = report.to_json_dict()
        payload["metrics"] = metrics.to_json_dict()
        payload["n"] = dataset.n
        payload["k"] = dataset.k
        payload["manifest"] = digest
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        trace_path = _out_base(args.out) + ".trace.csv"
        write_csv(
            trace_path,
            ["iter", "objective", "grad_norm", "step"],
            report.trace_detail,
            digest,
        )
        eval_path = _out_base(args.out) + ".eval.csv"
        write_csv(
            eval_path,
            ["objective", "value", "grad_norm", "n", "k", "seed"],
            [
                (
                    args.estimator,
                    report.final_objective,
                    report.grad_norm,
                    dataset.n,
                    dataset.k,
                    args.seed,
                )
            ],
            digest,
        )
        outputs = [args.out, trace_path, eval_path]
        if args.save_dataset:
            save_dataset_jsonl(dataset, args.save_dataset)
            outputs.append(args.save_dataset)
    manifest.output_paths = outputs
    manifest.wall_clock_seconds = watch.elapsed
    manifest.write(_out_base(args.out) + ".manifest.json")
    print(
        f"{args.estimator} fit: objective={report.final_objective:.6f} "
        f"kl={metrics.kl:.6f} d={metrics.d_metric:.3e} converged={report.converged}"
    )
    return 0


def cmd_counterexample(args) -> int:
    manifest = _manifest(args, "counterexample")
    rows = []
    with Stopwatch() as watch:
        problem = counterexample_problem()
        noise = NoiseDistribution.uniform(2)
        sf = problem.scoring
        from .evaluation import d_metric as d_metric_fn

        for k in COUNTEREXAMPLE_KS:
            binary = fit(
                sf, problem, noise,
                FitConfig(objective="population-binary", k=k, tol=args.tol,
                          max_iters=args.max_iters, seed=args.seed),
            )
            ranking = fit(
                sf, problem, noise,
                FitConfig(objective="population-ranking", k=k, tol=args.tol,
                          max_iters=args.max_iters, seed=args.seed),
            )
            cond_b = cond_prob(sf, binary.theta, 0)
            cond_r = cond_prob(sf, ranking.theta, 0)
            ratio_b = cond_b[0] / cond_b[1]
            ratio_r = cond_r[0] / cond_r[1]
            d_b = d_metric_fn(problem, sf, binary.theta)
            d_r = d_metric_fn(problem, sf, ranking.theta)
            rows.append(("binary", k, ratio_b, d_b))
            rows.append(("ranking", k, ratio_r, d_r))
            if abs(ratio_b - 3.0 / 7.0) > 1e-4:
                raise NumericError(
                    f"binary maximizer ratio {ratio_b!r} at K={k} is not 3/7 +- 1e-4"
                )
            if abs(ratio_r - 1.0 / 3.0) > 1e-4:
                raise NumericError(
                    f"ranking maximizer ratio {ratio_r!r} at K={k} is not 1/3 +- 1e-4"
                )
            if not d_b > d_r + 1e-3:
                raise NumericError(
                    f"binary distance {d_b!r} does not dominate ranking {d_r!r} at K={k}"
                )
        write_csv(
            args.out,
            ["estimator", "k", "conditional_ratio", "d_metric"],
            rows,
            manifest.digest(),
        )
    manifest.output_paths = [args.out]
    manifest.wall_clock_seconds = watch.elapsed
    manifest.write(_out_base(args.out) + ".manifest.json")
    print(
        "counterexample reproduced: binary pins the conditional ratio at 3/7, "
        "ranking recovers 1/3 (truth), for K in {1,2,5,10}"
    )
    return 0


def cmd_asymptotics(args) -> int:
    manifest = _manifest(args, "asymptotics")
    with Stopwatch() as watch:
        problem = _load_problem(args, manifest)
        if problem.theta_star is None:
            raise ValidationError("asymptotics needs a problem with theta_star")
        sf, theta_star = problem.scoring, problem.theta_star
        noise = tabular_noise(problem, args.noise)
        ks = [int(k) for k in args.K.split(",")]
        mode, num_samples = _parse_mode(args.mode)
        fisher = fisher_information(problem, sf, theta_star)
        fisher_inv = invert_spd(fisher, "fisher information")
        mle_mse = float(np.trace(fisher_inv)) / sf.n_params
        rows = []
        for k in ks:
            if args.estimator == "mle":
                rows.append(("mle", k, 0.0, 0.0, mle_mse, "exact", 0.0))
                continue
            if args.estimator == "ranking":
                use_mode = mode
                if mode == "exact" and problem.m_x * problem.m_y**k > 10**7:
                    raise BudgetError(
                        f"K={k} exceeds the exact budget; pass --mode mc:<M>"
                    )
                report = ranking_asymptotic_cov(
                    problem, sf, theta_star, noise, k,
                    mode=use_mode, num_samples=num_samples, seed=args.seed,
                )
                stderr = (
                    float(np.max(report.information_stderr))
                    if report.information_stderr is not None
                    else 0.0
                )
            else:
                if problem.gamma_star is None:
                    raise ValidationError(
                        "binary asymptotics needs gamma_star (self-normalized truth)"
                    )
                report = binary_asymptotic_cov(
                    problem, sf, theta_star, problem.gamma_star, noise, k
                )
                stderr = 0.0
            norm_diff = float(np.linalg.norm(report.inverse - fisher_inv, 2))
            rows.append(
                (
                    args.estimator,
                    k,
                    norm_diff,
                    report.mse_infinity - mle_mse,
                    report.mse_infinity,
                    report.mode,
                    stderr,
                )
            )
        write_csv(
            args.out,
            ["estimator", "k", "norm_diff", "mse_gap", "mse", "mode", "stderr"],
            rows,
            manifest.digest(),
        )
    manifest.output_paths = [args.out]
    manifest.wall_clock_seconds = watch.elapsed
    manifest.write(_out_base(args.out) + ".manifest.json")
    print(f"wrote {len(rows)} rate rows to {args.out}")
    return 0


def cmd_replicate(args) -> int:
    manifest = _manifest(args, "replicate")
    with Stopwatch() as watch:
        problem = _load_problem(args, manifest)
        noise = tabular_noise(problem, args.noise)
        cfg = FitConfig(
            objective=args.estimator,
            max_iters=args.max_iters,
            tol=args.tol,
            gamma_range=_parse_gamma_range(args.gamma_range),
        )
        summary = replicate(
            problem, cfg, noise, k=args.K, n=args.n,
            replications=args.replications, seeds=args.seed,
        )
        payload = summary.to_json_dict()
        payload["manifest"] = manifest.digest()
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    manifest.output_paths = [args.out]
    manifest.wall_clock_seconds = watch.elapsed
    manifest.write(_out_base(args.out) + ".manifest.json")
    print(
        f"{args.estimator} x{args.replications}: relative Frobenius error "
        f"{summary.rel_frobenius_error:.4f}, empirical mse {summary.empirical_mse:.4f} "
        f"vs theoretical {summary.theoretical_mse:.4f}"
    )
    return 0


def bundled_corpus_path() -> str:
    return str(resources.files("ncelab").joinpath("data/tiny_corpus.txt"))


def cmd_lm(args) -> int:
    manifest = _manifest(args, "lm")
    with Stopwatch() as watch:
        corpus_path = args.corpus or bundled_corpus_path()
        manifest.add_input("corpus", corpus_path)
        with open(corpus_path, encoding="utf-8") as f:
            text = f.read()
        cfg = LmConfig(
            loss=args.estimator,
            order=args.order,
            dim=args.dim,
            k=args.K,
            noise=args.noise,
            reg_alpha=args.reg_alpha,
            reg_m=args.reg_m,
            context_bias=args.context_bias,
            seed=args.seed,
            max_iters=args.max_iters,
            tol=args.tol,
            batch_size=args.batch_size,
            epochs=args.epochs,
            resample_negatives=args.resample_negatives,
        )
        report = run_lm_experiment(text, cfg)
        digest = manifest.digest()
        payload = report.to_json_dict()
        payload["manifest"] = digest
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        epoch_path = _out_base(args.out) + ".epochs.csv"
        write_csv(
            epoch_path,
            ["epoch", "train_ppl", "valid_ppl"],
            report.epoch_rows,
            digest,
        )
    manifest.output_paths = [args.out, epoch_path]
    manifest.wall_clock_seconds = watch.elapsed
    manifest.write(_out_base(args.out) + ".manifest.json")
    print(
        f"{args.estimator} lm: train_ppl={report.train_ppl:.3f} "
        f"valid_ppl={report.valid_ppl:.3f} var[log Z]={report.log_z_var:.5f}"
    )
    return 0


def _add_common_fit_flags(p: argparse.ArgumentParser, lm: bool = False) -> None:
    p.add_argument("--estimator", choices=("mle", "ranking", "binary"), default="mle")
    p.add_argument("--K", type=int, default=100 if lm else 4,
                   help="negatives per example")
    p.add_argument("--noise", default="unigram" if lm else "uniform",
                   help="uniform | unigram | unigram-pow:<p>")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=400 if lm else 5000)
    p.add_argument("--tol", type=float, default=1e-5 if lm else 1e-7)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ncelab",
        description=(
            "Conditional-model estimation by MLE and noise contrastive "
            "estimation (ranking and binary), with exact population "
            "objectives and asymptotic-efficiency diagnostics."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic tabular problem file")
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--m-x", type=int, default=200)
    p.add_argument("--m-y", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--kind",
        choices=("softmax", "self-normalized", "features"),
        default="softmax",
        help="softmax: per-label linear model (mixture-of-Gaussians inputs); "
             "self-normalized: constant-partition family for binary asymptotics; "
             "features: identifiable dense-feature problem",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit an estimator on a problem or dataset")
    p.add_argument("--problem", required=True)
    p.add_argument("--dataset", help="JSONL dataset; generated when omitted")
    p.add_argument("--n", type=int, default=10000, help="sample size when generating")
    p.add_argument("--context-bias", action="store_true",
                   help="add per-context bias parameters to the estimator")
    p.add_argument("--reg-alpha", type=float, default=0.0)
    p.add_argument("--reg-m", type=int, default=10)
    p.add_argument("--gamma-range", default="-30:30")
    p.add_argument("--save-dataset", help="also write the generated dataset")
    p.add_argument("--out", required=True)
    _add_common_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser(
        "counterexample",
        help="reproduce the binary-inconsistency instance (ratios 3/7 vs 1/3)",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("asymptotics", help="rate curves of asymptotic covariances in K")
    p.add_argument("--problem", required=True)
    p.add_argument("--estimator", choices=("mle", "ranking", "binary"), default="ranking")
    p.add_argument("--K", default="1,2,4", help="comma-separated K grid")
    p.add_argument("--noise", default="uniform")
    p.add_argument("--mode", default="exact", help="exact | mc:<M>")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_asymptotics)

    p = sub.add_parser("replicate", help="empirical covariance vs theory over R fits")
    p.add_argument("--problem", required=True)
    p.add_argument("--estimator", choices=("mle", "ranking", "binary"), default="mle")
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--noise", default="uniform")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--replications", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--gamma-range", default="-30:30")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("lm", help="log-bilinear language-model experiment")
    p.add_argument("--corpus", help="UTF-8 text; bundled toy corpus when omitted")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--context-bias", action="store_true",
                   help="per-history bias parameters (off reproduces the usual "
                        "c_x = 0 simplification)")
    p.add_argument("--reg-alpha", type=float, default=0.0)
    p.add_argument("--reg-m", type=int, default=None,
                   help="noise draws per example (default vocab/10)")
    p.add_argument("--batch-size", type=int, default=None,
                   help="minibatch size; full batch when omitted")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--resample-negatives", action="store_true",
                   help="redraw negatives every epoch (minibatch mode)")
    p.add_argument("--out", required=True)
    _add_common_fit_flags(p, lm=True)
    p.set_defaults(func=cmd_lm)

    return parser


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
