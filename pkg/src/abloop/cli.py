"""Command-line entry point.

Subcommands: train, synth-data, optimize, campaign, ablate, rank,
assay-sim. Every command takes a YAML config (--config), writes its
primary artifacts plus a run manifest under --out, and is byte-identical
on rerun with the same config and seed (manifests may differ only in
timestamp/duration). Exit codes: 0 success, 2 config error, 3 runtime
error, 4 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .campaign import (
    CampaignConfig,
    FilterConfig,
    PREDICTOR_MODES,
    PredictorConfig,
    ablation_run,
    run_campaign,
)
from .configio import (
    load_config,
    optional,
    required,
    sha256_bytes,
    write_manifest,
)
from .constants import CDR_REGIONS
from .denoiser import DenoiserConfig, TrainConfig, load_params, save_params, train
from .diffusion import make_schedule, serialize_schedule
from .errors import AbloopError, ConfigError, DataError
from .oracles import (
    SyntheticLandscape,
    assay,
    load_oracle,
    rank_candidates,
    records_hash,
    save_oracle,
    train_ensemble,
)
from .sampler import SampleConfig, generate, load_candidates, save_candidates
from .structio import load_complex, save_complex
from .synthetic import make_synthetic_dataset, starting_complex

log = logging.getLogger("abloop")

_SCHEDULE_SCHEMA = {
    "t_steps": optional(int, 100),
    "kind": optional(str, "cosine"),
    "beta_min": optional(float, 1e-4),
    "beta_max": optional(float, 0.5),
}

_SAMPLE_SCHEMA = {
    "t_noise": optional(int, 8),
    "cdrs": optional(list, list(CDR_REGIONS)),
    "num_samples": optional(int, 100),
    "max_cdr_edits": optional(int, 4),
    "gamma": optional(float, 0.0),
}

_LANDSCAPE_SCHEMA = {
    "seed": optional(int, 0),
    "sigma_meas": optional(float, 0.1),
    "n_epistatic_pairs": optional(int, 4),
    "mean_effect": optional(float, -0.3),
    "effect_scale": optional(float, 0.25),
    "epistasis_scale": optional(float, 0.1),
    "p_fail_base": optional(float, 0.05),
    "p_fail_slope": optional(float, 0.02),
}

_STARTING_SCHEMA = {
    "complex": optional(str, ""),
    "synthetic_seed": optional(int, 7),
}

_TRAIN_SCHEMA = {
    "schema_version": required(int),
    "seed": optional(int, 0),
    "dataset": {"n": optional(int, 200), "seed": optional(int, 100)},
    "model": {"d": optional(int, 64), "n_blocks": optional(int, 4)},
    "schedule": _SCHEDULE_SCHEMA,
    "train": {
        "steps": optional(int, 5000),
        "learning_rate": optional(float, 1e-4),
        "batch_size": optional(int, 8),
        "lambda_type": optional(float, 10.0),
        "lambda_pos": optional(float, 1.0),
        "lambda_orient": optional(float, 1.0),
        "patch_size": optional(int, 128),
        "checkpoint_interval": optional(int, 0),
        "log_interval": optional(int, 25),
    },
}

_SYNTH_SCHEMA = {
    "schema_version": required(int),
    "seed": optional(int, 0),
    "n": optional(int, 10),
}

_OPTIMIZE_SCHEMA = {
    "schema_version": required(int),
    "seed": optional(int, 0),
    "params": required(str),
    "complex": required(str),
    "schedule": _SCHEDULE_SCHEMA,
    "sample": _SAMPLE_SCHEMA,
    "guidance_oracle": optional(str, ""),
}

_CAMPAIGN_SCHEMA = {
    "schema_version": required(int),
    "seed": optional(int, 0),
    "params": required(str),
    "schedule": _SCHEDULE_SCHEMA,
    "starting": _STARTING_SCHEMA,
    "landscape": _LANDSCAPE_SCHEMA,
    "sample": _SAMPLE_SCHEMA,
    "campaign": {
        "num_rounds": optional(int, 3),
        "designs_per_round": optional(int, 24),
        "seeds_per_round": optional(int, 2),
        "guided": optional(bool, False),
        "gamma": optional(float, 2.0),
        "predictor": optional(str, "groundTruth"),
        "sigma_pred": optional(float, 0.5),
        "angle_deg": optional(float, 25.0),
    },
    "filters": {
        "charge_min": optional(float, None),
        "charge_max": optional(float, None),
        "forbidden_motifs": optional(list, []),
        "no_unpaired_cysteine": optional(bool, False),
    },
}

_ABLATE_SCHEMA = {
    "schema_version": required(int),
    "seed": optional(int, 0),
    "params": required(str),
    "schedule": _SCHEDULE_SCHEMA,
    "starting": _STARTING_SCHEMA,
    "modes": optional(list, list(PREDICTOR_MODES)),
    "sample": _SAMPLE_SCHEMA,
    "top_k": optional(int, 500),
    "sigma_pred": optional(float, 0.5),
    "angle_deg": optional(float, 25.0),
    "oracle": {
        "snapshot": optional(str, ""),
        "n_train": optional(int, 300),
        "train_seed": optional(int, 5),
    },
    "landscape": _LANDSCAPE_SCHEMA,
}

_RANK_SCHEMA = {
    "schema_version": required(int),
    "candidates": required(str),
    "oracle": required(str),
    "top_k": optional(int, 50),
}

_ASSAY_SCHEMA = {
    "schema_version": required(int),
    "seed": optional(int, 0),
    "candidates": required(str),
    "round_id": optional(int, 0),
    "starting": _STARTING_SCHEMA,
    "landscape": _LANDSCAPE_SCHEMA,
}


def _sample_config(section: dict, seed: int) -> SampleConfig:
    return SampleConfig(
        t_noise=section["t_noise"], mask_cdrs=tuple(section["cdrs"]),
        num_samples=section["num_samples"],
        max_cdr_edits=section["max_cdr_edits"],
        gamma=section["gamma"], seed=seed)


def _landscape_for(starting, section: dict) -> SyntheticLandscape:
    from .sampler import mask_positions_in_antibody
    return SyntheticLandscape(
        reference_sequence=starting.antibody_sequence,
        positions=mask_positions_in_antibody(starting),
        seed=section["seed"], sigma_meas=section["sigma_meas"],
        n_epistatic_pairs=section["n_epistatic_pairs"],
        mean_effect=section["mean_effect"],
        effect_scale=section["effect_scale"],
        epistasis_scale=section["epistasis_scale"],
        p_fail_base=section["p_fail_base"],
        p_fail_slope=section["p_fail_slope"])


def _load_starting(section: dict):
    if section["complex"]:
        return load_complex(section["complex"])
    return starting_complex(section["synthetic_seed"])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    started = time.time()
    cfg = load_config(args.config, _TRAIN_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _out_dir(args)
    sched = make_schedule(cfg["schedule"]["t_steps"], cfg["schedule"]["kind"],
                          cfg["schedule"]["beta_min"], cfg["schedule"]["beta_max"])
    schedule_text = serialize_schedule(sched)
    (out / "schedule.txt").write_text(schedule_text)

    dataset = make_synthetic_dataset(cfg["dataset"]["n"], cfg["dataset"]["seed"])
    section = cfg["train"]
    train_cfg = TrainConfig(
        steps=section["steps"], learning_rate=section["learning_rate"],
        batch_size=section["batch_size"],
        lambdas=(section["lambda_type"], section["lambda_pos"],
                 section["lambda_orient"]),
        patch_size=section["patch_size"], seed=cfg["seed"],
        checkpoint_interval=section["checkpoint_interval"],
        log_interval=section["log_interval"])
    model_cfg = DenoiserConfig(d=cfg["model"]["d"],
                               n_blocks=cfg["model"]["n_blocks"],
                               t_max=sched.t_max)
    log.info("training %d steps on %d complexes", train_cfg.steps, len(dataset))
    result = train(dataset, sched, train_cfg, model_cfg,
                   checkpoint_dir=out if section["checkpoint_interval"] else None)

    result.manifest["dataset_seed"] = cfg["dataset"]["seed"]
    result.manifest["schedule_sha256"] = sha256_bytes(schedule_text.encode())
    manifest_text = json.dumps(result.manifest, indent=2, sort_keys=True) + "\n"
    (out / "train_manifest.json").write_text(manifest_text)
    save_params(result.model, out / "params.bin",
                manifest_hash=sha256_bytes(manifest_text.encode()))

    with (out / "loss_curve.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_type", "l_pos", "l_orient", "total"])
        for row in result.loss_table:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
    from .plots import loss_curve_figure
    loss_curve_figure(result.loss_table, out / "loss_curve.png")

    artifacts = ["params.bin", "loss_curve.csv", "loss_curve.png",
                 "schedule.txt", "train_manifest.json"]
    artifacts += [f"params_step{s:06d}.bin" for s in result.checkpoints]
    write_manifest(out, "train", args.config, {"seed": cfg["seed"]},
                   artifacts, started, __version__)
    print(f"trained {train_cfg.steps} steps; params at {out / 'params.bin'}")
    return 0


def cmd_synth_data(args) -> int:
    started = time.time()
    cfg = load_config(args.config, _SYNTH_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _out_dir(args)
    complexes = make_synthetic_dataset(cfg["n"], cfg["seed"])
    names = []
    for i, c in enumerate(complexes):
        name = f"complex_{i:04d}.txt"
        save_complex(c, out / name)
        names.append(name)
    with (out / "index.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "n_residues", "n_mask", "n_antigen"])
        for name, c in zip(names, complexes):
            writer.writerow([name, c.n, len(c.mask_indices),
                             len(c.antigen_indices)])
    write_manifest(out, "synth-data", args.config, {"seed": cfg["seed"]},
                   names + ["index.csv"], started, __version__)
    print(f"wrote {len(names)} complexes to {out}")
    return 0


def cmd_optimize(args) -> int:
    started = time.time()
    cfg = load_config(args.config, _OPTIMIZE_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _out_dir(args)
    model = load_params(cfg["params"])
    seed_complex = load_complex(cfg["complex"])
    sched = make_schedule(cfg["schedule"]["t_steps"], cfg["schedule"]["kind"],
                          cfg["schedule"]["beta_min"], cfg["schedule"]["beta_max"])
    sample_cfg = _sample_config(cfg["sample"], cfg["seed"])
    oracle = load_oracle(cfg["guidance_oracle"]) if cfg["guidance_oracle"] else None
    candidates = generate(model, seed_complex, sched, sample_cfg,
                          guidance_oracle=oracle, seed_id="cli")
    save_candidates(candidates, out)
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["num_samples", "num_candidates", "max_cdr_edits"])
        writer.writerow([sample_cfg.num_samples, len(candidates),
                         sample_cfg.max_cdr_edits])
    artifacts = ["candidates.jsonl", "summary.csv"]
    artifacts += [f"complexes/candidate_{k:05d}.txt"
                  for k in range(len(candidates))]
    write_manifest(out, "optimize", args.config, {"seed": cfg["seed"]},
                   artifacts, started, __version__)
    print(f"generated {len(candidates)} candidates "
          f"({sample_cfg.num_samples} samples)")
    return 0


def cmd_campaign(args) -> int:
    started = time.time()
    cfg = load_config(args.config, _CAMPAIGN_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _out_dir(args)
    model = load_params(cfg["params"])
    sched = make_schedule(cfg["schedule"]["t_steps"], cfg["schedule"]["kind"],
                          cfg["schedule"]["beta_min"], cfg["schedule"]["beta_max"])
    starting = _load_starting(cfg["starting"])
    landscape = _landscape_for(starting, cfg["landscape"])
    section = cfg["campaign"]
    if section["predictor"] not in PREDICTOR_MODES:
        raise ConfigError(f"unknown predictor mode {section['predictor']!r}")
    filt = cfg["filters"]
    campaign_cfg = CampaignConfig(
        num_rounds=section["num_rounds"],
        designs_per_round=section["designs_per_round"],
        seeds_per_round=section["seeds_per_round"],
        sample=_sample_config(cfg["sample"], cfg["seed"]),
        predictor=PredictorConfig(mode=section["predictor"],
                                  sigma_pred=section["sigma_pred"],
                                  angle_deg=section["angle_deg"]),
        filters=FilterConfig(
            charge_min=filt["charge_min"], charge_max=filt["charge_max"],
            forbidden_motifs=tuple(filt["forbidden_motifs"]),
            no_unpaired_cysteine=filt["no_unpaired_cysteine"]),
        guided=section["guided"], gamma=section["gamma"], seed=cfg["seed"])
    result = run_campaign(starting, landscape, model, sched, campaign_cfg,
                          out_dir=out)
    from .plots import campaign_progress_figure
    campaign_progress_figure(result.rounds, out / "best_so_far.png")
    save_complex(starting, out / "starting_complex.txt")

    artifacts = ["rounds.jsonl", "assay_records.jsonl", "best_so_far.csv",
                 "best_so_far.png", "starting_complex.txt"]
    for sub in sorted((out / "oracles").glob("*.json")) if (out / "oracles").exists() else []:
        artifacts.append(str(sub.relative_to(out)))
    cand_dir = out / "candidates"
    if cand_dir.exists():
        for sub in sorted(cand_dir.rglob("*")):
            if sub.is_file():
                artifacts.append(str(sub.relative_to(out)))
    write_manifest(out, "campaign", args.config, {"seed": cfg["seed"]},
                   artifacts, started, __version__)
    best = result.rounds[-1].best_so_far
    print(f"campaign finished: {len(result.rounds)} rounds, "
          f"best measured {best:.3f}")
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = load_config(args.config, _ABLATE_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for mode in cfg["modes"]:
        if mode not in PREDICTOR_MODES:
            raise ConfigError(f"unknown ablation mode {mode!r}; "
                              f"choose from {PREDICTOR_MODES}")
    out = _out_dir(args)
    model = load_params(cfg["params"])
    sched = make_schedule(cfg["schedule"]["t_steps"], cfg["schedule"]["kind"],
                          cfg["schedule"]["beta_min"], cfg["schedule"]["beta_max"])
    starting = _load_starting(cfg["starting"])

    if cfg["oracle"]["snapshot"]:
        oracle = load_oracle(cfg["oracle"]["snapshot"])
    else:
        oracle = _fit_ablation_oracle(starting, cfg)
        save_oracle(oracle, out / "oracle_ensemble.json")

    sample_cfg = _sample_config(cfg["sample"], cfg["seed"])
    rows, scores = ablation_run(
        starting, list(cfg["modes"]), model, sched, oracle, sample_cfg,
        top_k=cfg["top_k"], seed=cfg["seed"], sigma_pred=cfg["sigma_pred"],
        angle_deg=cfg["angle_deg"])
    with (out / "ablation_report.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "n", "q1", "median", "q3"])
        for row in rows:
            writer.writerow([row.mode, row.n, repr(row.q1), repr(row.median),
                             repr(row.q3)])
    for mode, vals in scores.items():
        with (out / f"scores_{mode}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["score"])
            for v in vals:
                writer.writerow([repr(float(v))])
    from .plots import ablation_figure
    ablation_figure(scores, out / "ablation.png")
    artifacts = ["ablation_report.csv", "ablation.png"]
    artifacts += [f"scores_{m}.csv" for m in scores]
    if not cfg["oracle"]["snapshot"]:
        artifacts.append("oracle_ensemble.json")
    write_manifest(out, "ablate", args.config, {"seed": cfg["seed"]},
                   artifacts, started, __version__)
    for row in rows:
        print(f"{row.mode}: n={row.n} median={row.median:.3f}")
    return 0


def _fit_ablation_oracle(starting, cfg):
    """Train a ranking ensemble on simulated assays of random mutants."""
    from .campaign import random_mutation_baseline
    from .sampler import mask_positions_in_antibody
    landscape = _landscape_for(starting, cfg["landscape"])
    positions = mask_positions_in_antibody(starting)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg["oracle"]["train_seed"], 3])))
    mutants = random_mutation_baseline(
        starting.antibody_sequence, positions, cfg["oracle"]["n_train"],
        cfg["sample"]["max_cdr_edits"], rng)
    records = assay(landscape, [m.full_sequence for m in mutants], rng,
                    edit_distances=[m.edit_distance for m in mutants])
    return train_ensemble(records, seed=cfg["oracle"]["train_seed"],
                          positions=positions)


def cmd_rank(args) -> int:
    started = time.time()
    cfg = load_config(args.config, _RANK_SCHEMA)
    out = _out_dir(args)
    candidates = load_candidates(cfg["candidates"])
    oracle = load_oracle(cfg["oracle"])
    ranked = rank_candidates(oracle, candidates, cfg["top_k"])
    with (out / "ranked.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "seed_id", "sample_index", "sequence",
                         "edit_distance", "score"])
        for k, cand in enumerate(ranked, start=1):
            writer.writerow([k, cand.provenance[0], cand.provenance[2],
                             cand.sequence, cand.edit_distance,
                             repr(oracle.score(cand.full_sequence))])
    write_manifest(out, "rank", args.config, {}, ["ranked.csv"], started,
                   __version__)
    print(f"ranked {len(ranked)} candidates")
    return 0


def cmd_assay_sim(args) -> int:
    started = time.time()
    cfg = load_config(args.config, _ASSAY_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _out_dir(args)
    starting = _load_starting(cfg["starting"])
    landscape = _landscape_for(starting, cfg["landscape"])
    candidates = load_candidates(cfg["candidates"])
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([cfg["seed"], cfg["round_id"]])))
    records = assay(landscape, [c.full_sequence for c in candidates], rng,
                    round_id=cfg["round_id"],
                    edit_distances=[c.edit_distance for c in candidates])
    with (out / "records.jsonl").open("w") as fh:
        for rec in records:
            fh.write(rec.to_line() + "\n")
    n_ok = sum(1 for r in records if r.synthesized)
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_assayed", "n_synthesized", "records_hash"])
        writer.writerow([len(records), n_ok, records_hash(records)])
    write_manifest(out, "assay-sim", args.config, {"seed": cfg["seed"]},
                   ["records.jsonl", "summary.csv"], started, __version__)
    print(f"assayed {len(records)} sequences, {n_ok} synthesized")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abloop",
        description="Iterative antibody optimization with a "
                    "sequence-structure diffusion model")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "train": (cmd_train, "train the denoiser on synthetic complexes"),
        "synth-data": (cmd_synth_data, "generate synthetic complexes"),
        "optimize": (cmd_optimize, "noise-then-denoise a seed complex"),
        "campaign": (cmd_campaign, "run a multi-round design campaign"),
        "ablate": (cmd_ablate, "structural-noise ablation report"),
        "rank": (cmd_rank, "rank candidates with an oracle snapshot"),
        "assay-sim": (cmd_assay_sim, "simulated lab assay of candidates"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="torch thread count (default: all cores)")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("ABLOOP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        import torch
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except AbloopError as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
