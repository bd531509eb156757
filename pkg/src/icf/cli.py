"""Command line entry point.

    icf run [--config FILE] [--section.key VALUE ...]
    icf evaluate --checkpoint FILE [--config FILE] [--out DIR] [--section.key VALUE ...]
    icf show-config [--config FILE] [--section.key VALUE ...]

Exit codes: 0 success, 1 config error, 2 divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import criteria
from .config import ConfigError, ExperimentConfig, format_config, parse_config
from .environments import GridWorld, write_states_csv
from .metrics import MetricsBundle, compute_metrics
from .models import CheckpointError, load_checkpoint, save_checkpoint
from .report import pair_raster, write_heatmap_svg, write_matrix_csv, write_pgm
from .training import DivergenceError, TrainLog, probe_states, train

log = logging.getLogger("icf")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3

N_RASTERS = 4

RUN_FILES = ("config.txt", "train_log.csv", "checkpoint.bin", "probe_states.csv")
METRIC_FILES = (
    "metrics.csv",
    "slope_matrix.csv", "raw_slope_matrix.csv", "policy_matrix.csv",
    "selectivity_matrix.csv", "objective_matrix.csv",
    "slope_matrix.svg", "policy_matrix.svg", "selectivity_matrix.svg", "objective_matrix.svg",
    *(f"recon_{i}.pgm" for i in range(N_RASTERS)),
    "summary.txt",
)


def manifest(probe_size: int = N_RASTERS) -> list[str]:
    """Files written by ``run`` (fewer rasters when the probe set is tiny)."""
    n = min(N_RASTERS, probe_size)
    files = [f for f in RUN_FILES + METRIC_FILES
             if not f.startswith("recon_") or int(f[6:-4]) < n]
    return sorted(files)


def write_metrics(out: Path, bundle: MetricsBundle, variant: str, extra_lines=()) -> list[criteria.Check]:
    feats = [f"h{k}" for k in range(bundle.slope_matrix.shape[0])]
    pols = [f"pi{k}" for k in range(bundle.policy_matrix.shape[0])]
    acts = list(bundle.action_names)
    facts = list(bundle.factor_names)
    write_matrix_csv(out / "slope_matrix.csv", bundle.slope_matrix, feats, facts, "feature")
    write_matrix_csv(out / "raw_slope_matrix.csv", bundle.raw_slope_matrix, feats, facts, "feature")
    write_matrix_csv(out / "policy_matrix.csv", bundle.policy_matrix, pols, acts, "policy")
    write_matrix_csv(out / "selectivity_matrix.csv", bundle.selectivity_matrix, pols, acts, "policy")
    write_matrix_csv(out / "objective_matrix.csv", bundle.objective_matrix, pols, acts, "policy")
    with open(out / "metrics.csv", "w") as fh:
        fh.write("metric,value\n")
        fh.write(f"recon_mse,{bundle.recon_mse!r}\n")
        fh.write(f"probe_set_size,{bundle.probe_set_size}\n")
    write_heatmap_svg(out / "slope_matrix.svg", bundle.slope_matrix, feats, facts,
                      "standardized slope: factor vs latent feature", vmax=1.0)
    write_heatmap_svg(out / "policy_matrix.svg", bundle.policy_matrix, pols, acts,
                      "policy action probabilities", vmax=1.0)
    write_heatmap_svg(out / "selectivity_matrix.svg", bundle.selectivity_matrix, pols, acts,
                      "selectivity sel(s, a, k)", vmax=1.0)
    write_heatmap_svg(out / "objective_matrix.svg", bundle.objective_matrix, pols, acts,
                      "objective -pi_k log sel_k")
    for i, (orig, rec) in enumerate(bundle.samples[:N_RASTERS]):
        write_pgm(out / f"recon_{i}.pgm", pair_raster(orig, rec))
    checks = criteria.run_checks(bundle, variant)
    lines = [f"probe_set_size: {bundle.probe_set_size}", f"recon_mse: {bundle.recon_mse:.6g}",
             *extra_lines, "", "thresholds:"] + [c.line() for c in checks]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return checks


def run(config: ExperimentConfig) -> int:
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_config(config))
    except OSError as exc:
        log.error("cannot write to %s: %s", out, exc)
        return EXIT_IO

    env_cfg = config.env
    ckpt = out / "checkpoint.bin"

    def on_eval(step, model, tlog: TrainLog):
        save_checkpoint(ckpt, model, {"step": step})
        tlog.write_csv(out / "train_log.csv")

    started = time.perf_counter()
    try:
        model, tlog, bundle = train(config.training, env_cfg, config.model_config(),
                                    config.selectivity_config(), on_eval=on_eval)
        save_checkpoint(ckpt, model, {"step": config.training.steps})
        tlog.write_csv(out / "train_log.csv")
        env = GridWorld(env_cfg)
        write_states_csv(out / "probe_states.csv", env_cfg,
                         probe_states(env, config.training.probe_size, config.training.eval_seed))
        extra = [f"experiment: {config.name}", f"steps: {config.training.steps}",
                 f"wall_clock_seconds: {time.perf_counter() - started:.1f}",
                 f"heldout_recon_smoothed_monotone: {tlog.recon_monotone}"]
        checks = write_metrics(out, bundle, env_cfg.variant, extra)
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGENCE
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    for c in checks:
        log.info(c.line())
    return EXIT_OK


def evaluate(checkpoint, config: ExperimentConfig, out_dir=None) -> int:
    out = Path(out_dir or config.output_dir)
    try:
        model = load_checkpoint(checkpoint, expect=config.model_config())
    except CheckpointError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG if "does not match" in str(exc) else EXIT_IO
    try:
        out.mkdir(parents=True, exist_ok=True)
        env = GridWorld(config.env)
        probes = probe_states(env, config.training.probe_size, config.training.eval_seed)
        bundle = compute_metrics(model, env, probes, config.selectivity_config())
        write_metrics(out, bundle, config.env.variant, [f"checkpoint: {checkpoint}"])
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    if not all(np.all(np.isfinite(m)) for m in (bundle.selectivity_matrix, bundle.policy_matrix)):
        return EXIT_DIVERGENCE
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="icf", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="train and write all artifacts")
    p_run.add_argument("--config")
    p_eval = sub.add_parser("evaluate", help="recompute metrics from a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config")
    p_eval.add_argument("--out")
    p_show = sub.add_parser("show-config", help="print the fully resolved configuration")
    p_show.add_argument("--config")

    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = parse_config(args.config, rest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "show-config":
        sys.stdout.write(format_config(config))
        return EXIT_OK
    if args.command == "run":
        return run(config)
    return evaluate(args.checkpoint, config, args.out)


if __name__ == "__main__":
    sys.exit(main())
