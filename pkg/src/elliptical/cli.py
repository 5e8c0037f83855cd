"""Experiment runner: every subsystem behind one executable with flat
``key = value`` config files, per-key CLI overrides, seeded reproducibility
and CSV outputs.  Identical (config, seed) pairs produce byte-identical
output files.

Subcommands: nw-sparse, edge-preserve, estimator-bench, train-lm, diagnose,
verify.  The environment variable ELLIPTICAL_OUT sets the root for relative
output directories; exit status is 0 only when everything passed.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy import stats

from . import estimators, model, nwlab, verification
from .attention import minmax_scale_rows
from .numerics import derive_rng

_NS_BENCH = 41

EXPERIMENT_CSV_HEADER = ("experiment", "estimator", "seed", "n", "bandwidth", "metric", "value")

#: seed column value for rows aggregated over all seeds
AGGREGATE_SEED = -1


class UsageError(Exception):
    """Bad config or flags; reported with the offending key, exit status 2."""


# ---------------------------------------------------------------------------
# Config plumbing.
# ---------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_str(text: str) -> str:
    return text.strip()


@dataclass(frozen=True)
class Option:
    parse: Callable[[str], Any]
    default: Any = None
    required: bool = False


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and ``#`` comments ignored."""
    out: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"config line {ln}: expected key = value")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_config(schema: dict[str, Option], args: argparse.Namespace) -> dict[str, Any]:
    raw: dict[str, str] = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} does not exist")
        raw.update(parse_config_text(path.read_text()))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    cfg: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in schema:
            raise UsageError(f"unknown config key {key!r}")
        try:
            cfg[key] = schema[key].parse(value)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad value for key {key!r}: {exc}") from exc
    for key, opt in schema.items():
        if key in cfg:
            continue
        if opt.required:
            raise UsageError(f"missing required key {key!r}")
        cfg[key] = opt.default
    return cfg


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolve_out_dir(out: str) -> Path:
    root = os.environ.get("ELLIPTICAL_OUT", ".")
    path = Path(out)
    out_dir = path if path.is_absolute() else Path(root) / path
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def write_config_echo(out_dir: Path, cfg: dict[str, Any]) -> None:
    lines = [f"{key} = {_format_value(cfg[key])}" for key in sorted(cfg)]
    (out_dir / "config_echo.txt").write_text("\n".join(lines) + "\n")


def write_csv(path: Path, header: tuple[str, ...], rows: list[tuple]) -> None:
    """Fixed CSV dialect: mandatory header, comma separator, LF endings."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_value(v) for v in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# nw-sparse.
# ---------------------------------------------------------------------------

NW_SPARSE_SCHEMA = {
    "n": Option(int, required=True),
    "dim": Option(int, 5),
    "seeds": Option(int, 20),
    "seed": Option(int, 0),
    "noise_std": Option(float, 0.3),
    "n_queries": Option(int, 500),
    "weights_source": Option(_parse_str, "oracle"),
    "scaling": Option(_parse_str, "maxscale"),
    "truth": Option(_parse_str, "sparse"),  # sparse | equal
    "out": Option(_parse_str, "out/nw-sparse"),
}


def _nw_truth(kind: str, dim: int):
    if kind == "sparse":
        return estimators.sparse_sinusoid(dim, [0], [1.0], [2])
    if kind == "equal":
        return estimators.separable_sinusoid(np.ones(dim), np.ones(dim))
    raise UsageError(f"bad value for key 'truth': {kind!r}")


def cmd_nw_sparse(cfg: dict[str, Any], jobs: int) -> int:
    out_dir = resolve_out_dir(cfg["out"])
    write_config_echo(out_dir, cfg)
    truth = _nw_truth(cfg["truth"], cfg["dim"])
    result = nwlab.run_sparse_mse_experiment(
        nwlab.SparseMSEConfig(
            truth=truth,
            n=cfg["n"],
            n_queries=cfg["n_queries"],
            noise_std=cfg["noise_std"],
            seeds=cfg["seeds"],
            seed=cfg["seed"],
            weights_source=cfg["weights_source"],
            scaling=cfg["scaling"],
        ),
        jobs=jobs,
    )
    rows = []
    for s in range(cfg["seeds"]):
        for label, mses, bws in (
            ("euclidean", result.per_seed_euclidean, result.bandwidths_euclidean),
            ("elliptical", result.per_seed_elliptical, result.bandwidths_elliptical),
        ):
            rows.append(
                ("nw-sparse", label, s, cfg["n"], float(bws[s]), "mse", float(mses[s]))
            )
    for label, report in (("euclidean", result.euclidean), ("elliptical", result.elliptical)):
        rows.append(("nw-sparse", label, AGGREGATE_SEED, cfg["n"], report.bandwidth, "mse_mean", report.mse))
        rows.append(("nw-sparse", label, AGGREGATE_SEED, cfg["n"], report.bandwidth, "mse_stderr", report.stderr))
    rows.append(("nw-sparse", "elliptical", AGGREGATE_SEED, cfg["n"], result.elliptical.bandwidth, "p_value_less", result.p_value_less))

    pooled = float(np.hypot(result.euclidean.stderr, result.elliptical.stderr))
    gap = result.elliptical.mse - result.euclidean.mse
    if cfg["truth"] == "sparse":
        passed = gap < 0 and result.p_value_less < 0.05
        verdict = f"elliptical < euclidean, p={result.p_value_less:.4g}"
    else:
        passed = abs(gap) <= 2.0 * pooled
        verdict = f"|gap|={abs(gap):.4g} vs 2*pooled_se={2 * pooled:.4g}"
    rows.append(("nw-sparse", "both", AGGREGATE_SEED, cfg["n"], 0.0, "direction_pass", float(passed)))
    write_csv(out_dir / "results.csv", EXPERIMENT_CSV_HEADER, rows)
    print(f"nw-sparse direction: {'PASS' if passed else 'FAIL'} ({verdict})")
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# edge-preserve.
# ---------------------------------------------------------------------------

EDGE_SCHEMA = {
    "n": Option(int, required=True),
    "seeds": Option(int, 20),
    "seed": Option(int, 0),
    "noise_std": Option(float, 0.3),
    "query_offset": Option(float, 0.3),
    "est_t": Option(float, 0.1),
    "est_points": Option(int, 2000),
    "out": Option(_parse_str, "out/edge-preserve"),
}


def cmd_edge_preserve(cfg: dict[str, Any], jobs: int) -> int:
    out_dir = resolve_out_dir(cfg["out"])
    write_config_echo(out_dir, cfg)
    result = nwlab.run_edge_preservation_experiment(
        nwlab.EdgeConfig(
            n=cfg["n"],
            seeds=cfg["seeds"],
            seed=cfg["seed"],
            noise_std=cfg["noise_std"],
            query_offset=cfg["query_offset"],
            est_t=cfg["est_t"],
            est_points=cfg["est_points"],
        ),
        jobs=jobs,
    )
    rows = []
    for s in range(cfg["seeds"]):
        rows.append(("edge-preserve", "euclidean", s, cfg["n"], 0.0, "estimate_distance", float(result.per_seed_euclidean[s])))
        rows.append(("edge-preserve", "elliptical", s, cfg["n"], 0.0, "estimate_distance", float(result.per_seed_elliptical[s])))
    rows.append(("edge-preserve", "euclidean", AGGREGATE_SEED, cfg["n"], 0.0, "distance_mean", result.euclidean_mean))
    rows.append(("edge-preserve", "elliptical", AGGREGATE_SEED, cfg["n"], 0.0, "distance_mean", result.elliptical_mean))
    rows.append(("edge-preserve", "both", AGGREGATE_SEED, cfg["n"], 0.0, "piece_distance", result.piece_distance))
    passed = result.elliptical_mean >= result.euclidean_mean
    rows.append(("edge-preserve", "both", AGGREGATE_SEED, cfg["n"], 0.0, "direction_pass", float(passed)))
    write_csv(out_dir / "results.csv", EXPERIMENT_CSV_HEADER, rows)
    print(
        f"edge-preserve direction: {'PASS' if passed else 'FAIL'} "
        f"(elliptical {result.elliptical_mean:.4g} vs euclidean {result.euclidean_mean:.4g})"
    )
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# estimator-bench.
# ---------------------------------------------------------------------------

BENCH_SCHEMA = {
    "seeds": Option(int, 20),
    "seed": Option(int, 0),
    "n": Option(int, 2048),
    "delta": Option(float, 1.0),
    "noise_std": Option(float, 0.01),
    "out": Option(_parse_str, "out/estimator-bench"),
}


def cmd_estimator_bench(cfg: dict[str, Any], jobs: int) -> int:
    out_dir = resolve_out_dir(cfg["out"])
    write_config_echo(out_dir, cfg)
    catalog = estimators.ranking_catalog()
    sampler = estimators.uniform_sampler(-np.pi, np.pi, catalog.dim)
    rows = []

    taus = []
    for s in range(cfg["seeds"]):
        rng = derive_rng(cfg["seed"], _NS_BENCH, s)
        pair = estimators.simulate_layer_pair(
            catalog, cfg["n"], cfg["delta"], cfg["noise_std"], rng
        )
        over = estimators.estimate_overlayers(pair.v_curr, pair.v_prev, cfg["delta"])
        oracle = estimators.oracle_variability(catalog, sampler, 200, rng)
        tau = float(stats.kendalltau(over.raw, oracle.raw).statistic)
        taus.append(tau)
        rows.append(("estimator-bench", "overlayers", s, cfg["n"], 0.0, "kendall_tau", tau))
    rows.append(("estimator-bench", "overlayers", AGGREGATE_SEED, cfg["n"], 0.0, "kendall_tau_min", float(np.min(taus))))

    mixed = estimators.separable_sinusoid([1.0, 1.0, 0.0], [1, 1, 1], [0.0, np.pi / 2, 0.0])
    sizes, errors = estimators.consistency_error_curve(
        mixed, (100, 1000, 10_000, 100_000), t=0.01, seeds=5, seed=cfg["seed"]
    )
    slope = float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])
    for n_mc, err in zip(sizes, errors):
        rows.append(("estimator-bench", "consistent", AGGREGATE_SEED, int(n_mc), 0.0, "mean_abs_error", float(err)))
    rows.append(("estimator-bench", "consistent", AGGREGATE_SEED, cfg["n"], 0.0, "loglog_slope", slope))

    for sigma in (0.01, 0.1):
        rng = derive_rng(cfg["seed"], _NS_BENCH, 10_000 + int(sigma * 1000))
        slack = estimators.noise_drift_slack(catalog, sigma, 10_000, rng)
        rows.append(("estimator-bench", "overlayers", AGGREGATE_SEED, 10_000, 0.0, f"noise_slack_sigma_{sigma}", slack))

    write_csv(out_dir / "results.csv", EXPERIMENT_CSV_HEADER, rows)
    print(
        f"estimator-bench: min kendall tau {np.min(taus):.3f}, "
        f"consistency slope {slope:.3f}"
    )
    return 0


# ---------------------------------------------------------------------------
# train-lm.
# ---------------------------------------------------------------------------

TRAIN_SCHEMA = {
    "steps": Option(int, required=True),
    "corpus": Option(_parse_str, "synthetic"),  # synthetic | alternating | file
    "corpus_file": Option(_parse_str, ""),
    "corpus_length": Option(int, 8192),
    "corpus_symbols": Option(int, 12),
    "corpus_order": Option(int, 2),
    "eval_tokens": Option(int, 1024),
    "layers": Option(int, 4),
    "heads": Option(int, 2),
    "head_dim": Option(int, 16),
    "embed_dim": Option(int, 32),
    "ff_dim": Option(int, 64),
    "context": Option(int, 64),
    "elliptical": Option(_parse_bool, False),
    "scaling": Option(_parse_str, "maxscale"),
    "delta": Option(float, 1.0),
    "seed": Option(int, 0),
    "lr": Option(float, 3e-4),
    "batch_size": Option(int, 8),
    "corrupt": Option(_parse_bool, False),
    "corrupt_rate": Option(float, 0.025),
    "resume": Option(_parse_str, ""),
    "out": Option(_parse_str, "out/train-lm"),
}


def _build_corpus(cfg: dict[str, Any]) -> model.Corpus:
    kind = cfg["corpus"]
    if kind == "synthetic":
        return model.synthetic_corpus(
            cfg["seed"], cfg["corpus_length"], cfg["corpus_symbols"], cfg["corpus_order"]
        )
    if kind == "alternating":
        return model.alternating_corpus(cfg["corpus_length"])
    if kind == "file":
        path = Path(cfg["corpus_file"])
        if not cfg["corpus_file"] or not path.exists():
            raise FileNotFoundError(f"corpus file {cfg['corpus_file']!r} does not exist")
        return model.corpus_from_text(path.read_text(encoding="utf-8"))
    raise UsageError(f"bad value for key 'corpus': {kind!r}")


def _model_config(cfg: dict[str, Any], vocab_size: int) -> model.ModelConfig:
    return model.ModelConfig(
        vocab_size=vocab_size,
        layers=cfg["layers"],
        heads=cfg["heads"],
        head_dim=cfg["head_dim"],
        embed_dim=cfg["embed_dim"],
        ff_dim=cfg["ff_dim"],
        context=cfg["context"],
        elliptical=cfg["elliptical"],
        scaling=cfg["scaling"],
        delta=cfg["delta"],
        seed=cfg["seed"],
    )


def cmd_train_lm(cfg: dict[str, Any], jobs: int) -> int:
    out_dir = resolve_out_dir(cfg["out"])
    write_config_echo(out_dir, cfg)
    corpus = _build_corpus(cfg)
    eval_count = min(cfg["eval_tokens"], corpus.tokens.size // 4)
    train_tokens = corpus.tokens[: corpus.tokens.size - eval_count]
    eval_tokens = corpus.tokens[corpus.tokens.size - eval_count :]
    train_corpus = model.Corpus(train_tokens, corpus.charset)

    mcfg = _model_config(cfg, corpus.vocab_size)
    tp = model.TrainParams(steps=cfg["steps"], lr=cfg["lr"], batch_size=cfg["batch_size"])
    if cfg["resume"]:
        ckpt_path = Path(cfg["resume"])
        if not ckpt_path.exists():
            raise FileNotFoundError(f"checkpoint {ckpt_path} does not exist")
        ckpt = model.load_checkpoint(ckpt_path)
        if ckpt.cfg != mcfg:
            raise UsageError("resume checkpoint was trained with a different config")
        result = model.train(train_corpus, mcfg, tp, ckpt.params, ckpt.opt, ckpt.step)
    else:
        result = model.train(train_corpus, mcfg, tp)

    model.save_checkpoint(out_dir / "checkpoint.bin", result.params, mcfg, result.opt, result.steps_done)
    first_step = result.steps_done - cfg["steps"]
    write_csv(
        out_dir / "loss.csv",
        ("step", "loss"),
        [(first_step + i, float(l)) for i, l in enumerate(result.losses)],
    )
    metrics: list[tuple] = [
        ("ppl_clean", model.perplexity(result.params, mcfg, eval_tokens))
    ]
    if cfg["corrupt"]:
        rng = derive_rng(cfg["seed"], model.NS_EVAL, 1)
        metrics.append(
            (
                "ppl_corrupt",
                model.perplexity(
                    result.params, mcfg, eval_tokens, corrupt_rate=cfg["corrupt_rate"], rng=rng
                ),
            )
        )
    write_csv(out_dir / "metrics.csv", ("metric", "value"), metrics)
    print(f"train-lm: {cfg['steps']} steps, final loss {result.losses[-1] if result.losses else float('nan'):.4f}")
    return 0


# ---------------------------------------------------------------------------
# diagnose.
# ---------------------------------------------------------------------------

DIAGNOSE_SCHEMA = {
    "checkpoint": Option(_parse_str, required=True),
    "corpus": Option(_parse_str, "synthetic"),
    "corpus_file": Option(_parse_str, ""),
    "corpus_length": Option(int, 8192),
    "corpus_symbols": Option(int, 12),
    "corpus_order": Option(int, 2),
    "eval_tokens": Option(int, 512),
    "epsilons": Option(_parse_str, "0.01,0.1,1.0"),
    "corrupt_rate": Option(float, 0.025),
    "seed": Option(int, 0),
    "out": Option(_parse_str, "out/diagnose"),
}


def cmd_diagnose(cfg: dict[str, Any], jobs: int) -> int:
    ckpt_path = Path(cfg["checkpoint"])
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint {ckpt_path} does not exist")
    out_dir = resolve_out_dir(cfg["out"])
    write_config_echo(out_dir, cfg)
    ckpt = model.load_checkpoint(ckpt_path)
    corpus_cfg = dict(cfg)
    corpus_cfg["seed"] = ckpt.cfg.seed  # eval stream follows the trained model
    corpus = _build_corpus(corpus_cfg)
    eval_tokens = corpus.tokens[-cfg["eval_tokens"] :]
    epsilons = tuple(float(x) for x in cfg["epsilons"].split(",") if x)
    if not epsilons:
        raise UsageError("bad value for key 'epsilons': need at least one scale")
    rng = derive_rng(cfg["seed"], model.NS_EVAL, 2)
    report = model.diagnose(
        ckpt.params, ckpt.cfg, eval_tokens, epsilons, rng, corrupt_rate=cfg["corrupt_rate"]
    )

    rows: list[tuple] = []
    for li in range(ckpt.cfg.layers):
        rows.append(("cosine_similarity", li + 1, report.cosine_by_layer[li]))
    for li in range(ckpt.cfg.layers):
        rows.append(("head_distance", li + 1, report.head_distance_by_layer[li]))
    for si, scale in enumerate(epsilons):
        for li in range(ckpt.cfg.layers):
            rows.append((f"robustness_eps_{scale}", li + 1, float(report.robustness[li, si])))
    write_csv(out_dir / "diagnostics.csv", ("metric", "layer", "value"), rows)
    write_csv(
        out_dir / "metrics.csv",
        ("metric", "value"),
        [
            ("ppl_clean", report.ppl_clean),
            ("ppl_corrupt", report.ppl_corrupt),
            ("robustness_sup", report.robustness_sup),
        ],
    )

    tape = model.GradTape()
    window = eval_tokens[: ckpt.cfg.context + 1]
    _, states = model.forward(window[:-1], ckpt.params, ckpt.cfg, tape)
    for st in states:
        for h, attn in enumerate(st.head_attn):
            scaled = minmax_scale_rows(attn)
            path = out_dir / f"heatmap_l{st.layer + 1}_h{h}.csv"
            header = ("query",) + tuple(f"key{j}" for j in range(scaled.shape[1]))
            body = [(i,) + tuple(float(x) for x in scaled[i]) for i in range(scaled.shape[0])]
            lines = ["# rows min-max scaled to [0,1]; constant rows map to all zeros"]
            lines.append(",".join(header))
            for row in body:
                lines.append(",".join(_format_value(v) for v in row))
            with open(path, "w", newline="\n") as fh:
                fh.write("\n".join(lines) + "\n")
    print(f"diagnose: wrote per-layer metrics and {sum(len(s.head_attn) for s in states)} heatmaps")
    return 0


# ---------------------------------------------------------------------------
# verify.
# ---------------------------------------------------------------------------

VERIFY_SCHEMA = {
    "seed": Option(int, 0),
    "kappa_offset": Option(float, 0.0),  # test hook: nonzero must break the jacobian suite
    "out": Option(_parse_str, "out/verify"),
}


def cmd_verify(cfg: dict[str, Any], jobs: int) -> int:
    out_dir = resolve_out_dir(cfg["out"])
    write_config_echo(out_dir, cfg)
    results = verification.run_all_suites(seed=cfg["seed"], kappa_offset=cfg["kappa_offset"])
    rows = [(r.name, int(r.passed), r.slack, r.detail) for r in results]
    write_csv(out_dir / "verify.csv", ("suite", "passed", "slack", "detail"), rows)
    for r in results:
        print(f"{r.name}: {'PASS' if r.passed else 'FAIL'} (max slack {r.slack:.3e}; {r.detail})")
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------------------
# Entry point.
# ---------------------------------------------------------------------------

COMMANDS: dict[str, tuple[dict[str, Option], Callable[[dict[str, Any], int], int]]] = {
    "nw-sparse": (NW_SPARSE_SCHEMA, cmd_nw_sparse),
    "edge-preserve": (EDGE_SCHEMA, cmd_edge_preserve),
    "estimator-bench": (BENCH_SCHEMA, cmd_estimator_bench),
    "train-lm": (TRAIN_SCHEMA, cmd_train_lm),
    "diagnose": (DIAGNOSE_SCHEMA, cmd_diagnose),
    "verify": (VERIFY_SCHEMA, cmd_verify),
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="elliptical",
        description="Experiment runner for metric-weighted attention",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="flat key = value config file")
        cmd.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a single config key",
        )
        cmd.add_argument("--jobs", type=int, default=1, help="threads across seeds")
    args = parser.parse_args(argv)
    schema, runner = COMMANDS[args.command]
    try:
        cfg = load_config(schema, args)
        return runner(cfg, max(1, args.jobs))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
