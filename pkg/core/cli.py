#!/usr/bin/env python3
"""
Command-line surface
- precompute: Riemannian-normal tables (binary + CSV sidecar)
- train / sample / eval: predictor training, generation and the NLL bound
- diagnose: MMD, projected-vs-full, radial convergence, objective and dimension-splitting ablation reports
Exit codes: 0 ok, 2 config error, 3 invariant violation, 4 missing or mismatched artifact
"""

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from core.bridges import early_progress, max_interval_drop, radial_convergence_curve
from core.config import Config, RunConfig
from core.exceptions import (ArtifactFormatError, ArtifactMismatchError, ConfigError, DatasetError, DomainError,
                             InvariantViolation, MissingArtifactError, SphereDiffError)
from core.geometry import SpherePoint, geodesic_distance, inner, one_hot
from core.precompute import (PrecomputedTable, build_table, load_tables, save_tables, simulate_projected,
                             simulated_projections)
from core.predictor import MLPPredictor, load_checkpoint, save_checkpoint
from core.rnormal import PSI_TOL, mmd_transition_rows
from core.sampling_eval import SampleConfig, estimate_nll, marginal_diagnostics, sample_sequences, write_histogram
from core.schedules import NoiseSchedule, TimeProposal
from core.seeding import named_rng
from core.training import SplitCodec, TrainConfig, barycenter_point, mask_point, new_state, train
from data.datasets import (ArraySampler, SyntheticSource, TextCorpus, TextSampler, detokenize, read_jsonl,
                           stack_sequences, write_jsonl)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_ARTIFACT = 4

REPORTS = ("mmd", "projected", "radial", "ablation", "split")
# split is opt-in
DEFAULT_REPORTS = REPORTS[:-1]
TABLE_KINDS = {"masked": ("mask",), "uniform": ("barycenter",), "mixture": ("mask", "barycenter")}


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    return NoiseSchedule(cfg["sigma0"], cfg["sigmaT"], cfg["horizon"])


def build_proposal(cfg: RunConfig) -> TimeProposal:
    return TimeProposal(cfg["is_eps"], cfg["is_a"], cfg["is_b"], cfg["horizon"])


def build_codec(cfg: RunConfig) -> SplitCodec:
    return SplitCodec(cfg["vocab_size"], cfg["split_base"], cfg.mode)


def build_predictor(cfg: RunConfig, codec: SplitCodec) -> MLPPredictor:
    return MLPPredictor(codec.d, codec.m, codec.base, codec.sphere_dim, cfg["model.hidden"],
                        context=cfg["model.context"], time_features=cfg["model.time_features"],
                        masked=codec.has_mask, T=cfg["horizon"], seed=cfg.seed, mode=codec.mode)


def build_train_config(cfg: RunConfig, objective: Optional[str] = None, steps: Optional[int] = None) -> TrainConfig:
    return TrainConfig(
        objective=objective or cfg["train.objective"], batch_size=cfg["train.batch_size"],
        steps=steps or cfg["train.steps"], lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"],
        ema_decay=cfg["train.ema_decay"], grad_clip=cfg["train.grad_clip"], seq_len=cfg["train.seq_len"],
        log_every=cfg["train.log_every"], seed=cfg.seed, lambda_=cfg["lambda_mask"],
        stop_delta=cfg["stop_delta"], xt_sampler=cfg["train.xt_sampler"], sim_steps=cfg["train.sim_steps"],
    )


def initial_point(kind: str, codec: SplitCodec) -> np.ndarray:
    return mask_point(codec) if kind == "mask" else barycenter_point(codec)


def out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg["paths.out_dir"] or Config.ARTIFACT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def table_path(cfg: RunConfig) -> Path:
    return Path(cfg["paths.table"]) if cfg["paths.table"] else out_dir(cfg) / "table.bin"


def checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg["paths.checkpoint"]) if cfg["paths.checkpoint"] else out_dir(cfg) / "model.ckpt"


def require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise MissingArtifactError(str(path), producer)
    return path


def load_checked_tables(cfg: RunConfig, codec: SplitCodec, schedule: NoiseSchedule) -> Dict[str, object]:
    """Tables keyed by initial-point kind, refused when they were built for another geometry or schedule"""
    tables = {t.init_kind: t for t in load_tables(str(require(table_path(cfg), "precompute")))}
    for kind in TABLE_KINDS[codec.mode]:
        if kind not in tables:
            raise ArtifactMismatchError("Precomputed tables", {"init_kind": (kind, sorted(tables))})
        table = tables[kind]
        psi = float(inner(initial_point(kind, codec), one_hot(0, codec.sphere_dim)))
        diff = {}
        if table.d != codec.sphere_dim:
            diff["d"] = (codec.sphere_dim, table.d)
        if abs(table.psi0 - psi) > PSI_TOL:
            diff["psi0"] = (psi, table.psi0)
        for key, value in (("sigma_0", schedule.sigma_0), ("sigma_T", schedule.sigma_T), ("T", schedule.T)):
            if not math.isclose(float(table.provenance[key]), value, rel_tol=1e-12):
                diff[key] = (value, table.provenance[key])
        if diff:
            raise ArtifactMismatchError(f"Table {kind}", diff)
    return tables


def training_sampler(cfg: RunConfig):
    if cfg["data.kind"] == "text":
        return TextSampler(TextCorpus(cfg["data.path"], cfg["train.seq_len"]))
    source = build_source(cfg)
    ids = source.generate(cfg["source.num_sequences"], cfg["train.seq_len"],
                          named_rng(cfg["source.seed"], "data/train"))
    return ArraySampler(ids)


def build_source(cfg: RunConfig) -> SyntheticSource:
    return SyntheticSource(cfg["source.kind"], probs=cfg["source.probs"], matrix=cfg["source.matrix"],
                           seed=cfg["source.seed"])


def evaluation_ids(cfg: RunConfig, data_path: Optional[str] = None) -> np.ndarray:
    n = cfg["eval.num_sequences"]
    if data_path:
        return stack_sequences(read_jsonl(data_path)[:n])
    if cfg["data.kind"] == "text":
        corpus = TextCorpus(cfg["data.path"], cfg["train.seq_len"])
        return corpus.sample(n, named_rng(cfg.seed, "data/eval"))
    return build_source(cfg).generate(n, cfg["train.seq_len"], named_rng(cfg["source.seed"], "data/eval"))


def write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence[float]]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])
    logger.info(f"✅ Wrote {path}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def build_tables(cfg: RunConfig, codec: SplitCodec, schedule: NoiseSchedule) -> List[PrecomputedTable]:
    tables = []
    for kind in TABLE_KINDS[codec.mode]:
        u = SpherePoint(initial_point(kind, codec))
        tables.append(build_table(u, schedule, codec.sphere_dim, cfg["precompute.trajectories"],
                                  cfg["precompute.steps"], cfg.seed, num_tokens=codec.base, init_kind=kind,
                                  noise=cfg["precompute.noise"], calibrate=cfg["precompute.calibrate"]))
    return tables


def cmd_precompute(cfg: RunConfig) -> Path:
    tables = build_tables(cfg, build_codec(cfg), build_schedule(cfg))
    path = table_path(cfg)
    save_tables(str(path), tables)
    for table in tables:
        table.to_csv(str(path.with_suffix(f".{table.init_kind}.csv")))
        print(f"✅ {table.init_kind}: d={table.d} psi0={table.psi0:.6f} K={table.K} "
              f"alpha_T={table.alpha[-1]:.4f} calibration={table.provenance['calibration']:.4f}")
    print(f"📁 Tables written to {path}")
    return path


def cmd_train(cfg: RunConfig) -> Path:
    codec = build_codec(cfg)
    schedule = build_schedule(cfg)
    tables = {} if cfg["train.xt_sampler"] == "simulate" else load_checked_tables(cfg, codec, schedule)
    predictor = build_predictor(cfg, codec)
    train_cfg = build_train_config(cfg)
    state = train(new_state(predictor, train_cfg), training_sampler(cfg), codec, tables, schedule,
                  build_proposal(cfg), train_cfg, log_path=str(out_dir(cfg) / "train_log.csv"))
    path = checkpoint_path(cfg)
    meta = {"seed": cfg.seed, "objective": train_cfg.objective, "steps": state.step, "ce_clips": state.ce_clips}
    save_checkpoint(str(path), predictor, ema=state.ema, meta=meta)
    print(f"✅ Trained {state.step} steps, final loss {state.history[-1]:.4f}; checkpoint {path}")
    return path


def _load_model(cfg: RunConfig):
    predictor, ema, _ = load_checkpoint(str(require(checkpoint_path(cfg), "train")))
    if cfg["sample.use_ema"] and ema is not None:
        predictor.set_params(ema)
    return predictor


def cmd_sample(cfg: RunConfig) -> Path:
    codec = build_codec(cfg)
    predictor = _load_model(cfg)
    sample_cfg = SampleConfig(cfg["sample.steps"], cfg["sample.seq_len"], cfg.mode, cfg["lambda_mask"],
                              cfg["stop_delta"], cfg.seed, cfg["sample.num"], cfg["sample.noise_scale"])
    sequences = sample_sequences(predictor, codec, sample_cfg, build_schedule(cfg))
    path = out_dir(cfg) / "samples.jsonl"
    write_jsonl(str(path), sequences)
    for seq in sequences[:5]:
        print(detokenize(seq.ids) if cfg["data.kind"] == "text" else " ".join(map(str, seq.ids)))
    return path


def cmd_eval(cfg: RunConfig, data_path: Optional[str] = None) -> Path:
    codec = build_codec(cfg)
    predictor = _load_model(cfg)
    report = estimate_nll(predictor, codec, evaluation_ids(cfg, data_path), build_schedule(cfg),
                          quad=cfg["eval.quad"], draws=cfg["eval.draws"], stop_delta=cfg["stop_delta"],
                          sim_steps=cfg["eval.sim_steps"], seed=cfg.seed, lambda_=cfg["lambda_mask"])
    path = out_dir(cfg) / "eval.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report.to_dict(), sort_keys=True))
    samples = out_dir(cfg) / "samples.jsonl"
    if samples.is_file():
        tv, histogram = marginal_diagnostics(stack_sequences(read_jsonl(str(samples))),
                                             evaluation_ids(cfg, data_path), codec.d)
        write_histogram(str(out_dir(cfg) / "unigram.csv"), histogram)
        print(f"📊 Unigram TV(samples, data) = {tv:.4f}")
    return path


def _diagnose_mmd(cfg: RunConfig, codec: SplitCodec, schedule: NoiseSchedule, checkpoints: np.ndarray) -> Path:
    tables = load_checked_tables(cfg, codec, schedule)
    kind = TABLE_KINDS[codec.mode][0]
    rows = mmd_transition_rows(tables[kind], initial_point(kind, codec), one_hot(0, codec.sphere_dim), schedule,
                               checkpoints, cfg["diagnose.trajectories"], cfg["diagnose.steps"], cfg["stop_delta"],
                               cfg.seed)
    path = out_dir(cfg) / "mmd.csv"
    write_rows(path, ["t", "mmd_sim_approx", "mmd_sim_sim"], rows)
    return path


def _diagnose_projected(cfg: RunConfig, codec: SplitCodec, schedule: NoiseSchedule, checkpoints: np.ndarray) -> Path:
    kind = TABLE_KINDS[codec.mode][0]
    u = initial_point(kind, codec)
    target = one_hot(0, codec.sphere_dim)
    psi0 = float(inner(u, target))
    n = cfg["diagnose.trajectories"]
    projected = simulate_projected(psi0, schedule, codec.sphere_dim, n, cfg["diagnose.steps"], cfg.seed,
                                   name="diagnose/projected", noise=cfg["precompute.noise"])
    full = simulated_projections(u, target, schedule, n, cfg["diagnose.steps"], cfg["stop_delta"], checkpoints,
                                 cfg.seed, name="diagnose/full")
    rows = []
    for j, t in enumerate(full["t"]):
        at = lambda series: float(np.interp(t, projected.times, series))  # noqa: E731
        rows.append((float(t), at(projected.ez_T), at(projected.se_T), float(full["ez_T"][j]), float(full["se_T"][j]),
                     at(projected.ez_0), at(projected.se_0), float(full["ez_0"][j]), float(full["se_0"][j])))
    path = out_dir(cfg) / "projected.csv"
    write_rows(path, ["t", "proj_ez_T", "proj_se_T", "sim_ez_T", "sim_se_T",
                      "proj_ez_0", "proj_se_0", "sim_ez_0", "sim_se_0"], rows)
    return path


def _diagnose_radial(cfg: RunConfig, codec: SplitCodec, schedule: NoiseSchedule) -> Path:
    kind = TABLE_KINDS[codec.mode][0]
    r0 = geodesic_distance(SpherePoint(initial_point(kind, codec)), SpherePoint(one_hot(0, codec.sphere_dim)))
    reverse = NoiseSchedule(schedule.sigma_T, schedule.sigma_0, schedule.T)
    curves = {}
    for label, sched in (("increasing", schedule), ("decreasing", reverse)):
        times, curves[label] = radial_convergence_curve(sched, codec.sphere_dim, r0, cfg["diagnose.steps"],
                                                        cfg["stop_delta"], cfg["diagnose.trajectories"], cfg.seed)
        print(f"📉 {label} sigma: {early_progress(times, curves[label], 0.5 * sched.T):.1%} of the decrease by T/2, "
              f"largest drop between checkpoints {max_interval_drop(curves[label]):.4f}")
    path = out_dir(cfg) / "radial.csv"
    write_rows(path, ["t", "r_increasing", "r_decreasing"],
               [(float(t), float(a), float(b)) for t, a, b in zip(times, curves["increasing"], curves["decreasing"])])
    return path


def _diagnose_ablation(cfg: RunConfig, codec: SplitCodec, schedule: NoiseSchedule) -> Path:
    tables = {} if cfg["train.xt_sampler"] == "simulate" else load_checked_tables(cfg, codec, schedule)
    sampler = training_sampler(cfg)
    eval_ids = evaluation_ids(cfg)
    rows = []
    for objective in ("mse", "ce", "ce_importance"):
        train_cfg = build_train_config(cfg, objective, cfg["diagnose.ablation_steps"])
        state = train(new_state(build_predictor(cfg, codec), train_cfg), sampler, codec, tables, schedule,
                      build_proposal(cfg), train_cfg, log_path=str(out_dir(cfg) / f"ablation_{objective}.csv"))
        state.predictor.set_params(state.ema)
        report = estimate_nll(state.predictor, codec, eval_ids, schedule, quad=cfg["eval.quad"],
                              draws=cfg["eval.draws"], stop_delta=cfg["stop_delta"], sim_steps=cfg["eval.sim_steps"],
                              seed=cfg.seed, lambda_=cfg["lambda_mask"])
        rows.append((objective, report.nll_nats_per_token, report.mc_std_error))
        print(f"🧪 {objective}: NLL bound {report.nll_nats_per_token:.4f} ± {report.mc_std_error:.4f}")
    path = out_dir(cfg) / "ablation.csv"
    write_rows(path, ["objective", "nll", "std_error"], rows)
    return path


def matched_hidden(cfg: RunConfig, codec: SplitCodec, budget: int) -> List[int]:
    """Equal-width layers (same depth as model.hidden) whose parameter count is closest to budget"""
    depth = len(cfg["model.hidden"])

    def count(width: int) -> int:
        return MLPPredictor(codec.d, codec.m, codec.base, codec.sphere_dim, [width] * depth,
                            context=cfg["model.context"], time_features=cfg["model.time_features"],
                            masked=codec.has_mask, seed=None).num_params

    best = min(range(1, max(cfg["model.hidden"]) + 1), key=lambda w: abs(count(w) - budget))
    return [best] * depth


def _diagnose_split(cfg: RunConfig, schedule: NoiseSchedule) -> Path:
    base = cfg["split_base"] or 16
    if not 2 <= base < cfg["vocab_size"]:
        raise ConfigError("Invalid split report",
                          [("split_base", None, f"need 2 <= base < vocab_size, got {base}")])
    split = SplitCodec(cfg["vocab_size"], base, cfg.mode)
    whole = SplitCodec(cfg["vocab_size"], 0, cfg.mode)
    budget = build_predictor(cfg, split).num_params
    sampler = training_sampler(cfg)
    eval_ids = evaluation_ids(cfg)
    train_cfg = build_train_config(cfg, steps=cfg["diagnose.ablation_steps"])
    rows = []
    for label, codec in ((f"split_b{base}", split), ("no_split", whole)):
        hidden = cfg["model.hidden"] if codec is split else matched_hidden(cfg, codec, budget)
        predictor = MLPPredictor(codec.d, codec.m, codec.base, codec.sphere_dim, hidden,
                                 context=cfg["model.context"], time_features=cfg["model.time_features"],
                                 masked=codec.has_mask, T=cfg["horizon"], seed=cfg.seed, mode=codec.mode)
        tables = {} if cfg["train.xt_sampler"] == "simulate" else {
            t.init_kind: t for t in build_tables(cfg, codec, schedule)}
        state = train(new_state(predictor, train_cfg), sampler, codec, tables, schedule, build_proposal(cfg),
                      train_cfg, log_path=str(out_dir(cfg) / f"split_{label}.csv"))
        state.predictor.set_params(state.ema)
        report = estimate_nll(state.predictor, codec, eval_ids, schedule, quad=cfg["eval.quad"],
                              draws=cfg["eval.draws"], stop_delta=cfg["stop_delta"], sim_steps=cfg["eval.sim_steps"],
                              seed=cfg.seed, lambda_=cfg["lambda_mask"])
        rows.append((label, codec.sphere_dim, predictor.num_params, report.nll_nats_per_token, report.mc_std_error))
        print(f"🧪 {label}: {predictor.num_params} parameters, "
              f"NLL bound {report.nll_nats_per_token:.4f} ± {report.mc_std_error:.4f}")
    path = out_dir(cfg) / "split.csv"
    write_rows(path, ["variant", "sphere_dim", "num_params", "nll", "std_error"], rows)
    return path


def cmd_diagnose(cfg: RunConfig, only: Sequence[str] = DEFAULT_REPORTS) -> List[Path]:
    codec = build_codec(cfg)
    schedule = build_schedule(cfg)
    checkpoints = np.linspace(0.0, schedule.T - cfg["stop_delta"], cfg["diagnose.checkpoints"] + 1)[1:]
    paths = []
    for report in only:
        logger.info(f"🔄 Diagnose: {report}")
        if report == "mmd":
            paths.append(_diagnose_mmd(cfg, codec, schedule, checkpoints))
        elif report == "projected":
            paths.append(_diagnose_projected(cfg, codec, schedule, checkpoints))
        elif report == "radial":
            paths.append(_diagnose_radial(cfg, codec, schedule))
        elif report == "ablation":
            paths.append(_diagnose_ablation(cfg, codec, schedule))
        else:
            paths.append(_diagnose_split(cfg, schedule))
    return paths


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _reports(raw: str) -> List[str]:
    names = [x.strip() for x in raw.split(",") if x.strip()]
    unknown = sorted(set(names) - set(REPORTS))
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown reports {unknown}; choose from {', '.join(REPORTS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spherediff", description="Hypersphere diffusion language modeling")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="dotenv-format run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--seed", type=int, help="root seed")
        return p

    p = add("precompute", "build Riemannian-normal tables")
    p.add_argument("--out", help="table file")

    p = add("train", "train the predictor")
    p.add_argument("--data", help="text corpus (switches data.kind to text)")
    p.add_argument("--table", help="table file")
    p.add_argument("--out", help="checkpoint file")

    p = add("sample", "generate sequences")
    p.add_argument("--ckpt", help="checkpoint file")
    p.add_argument("--num", type=int, help="number of sequences")
    p.add_argument("--len", dest="length", type=int, help="sequence length")
    p.add_argument("--steps", type=int, help="random-walk steps")

    p = add("eval", "estimate the NLL bound")
    p.add_argument("--ckpt", help="checkpoint file")
    p.add_argument("--data", help="JSON-lines file of token sequences")
    p.add_argument("--quad", type=int, help="quadrature times")
    p.add_argument("--draws", type=int, help="noise draws per sequence")

    p = add("diagnose", "write diagnostic CSV reports")
    p.add_argument("--only", type=_reports, default=list(DEFAULT_REPORTS), help=f"subset of {','.join(REPORTS)}")
    return parser


FLAG_KEYS = {
    ("precompute", "out"): "paths.table",
    ("train", "table"): "paths.table",
    ("train", "out"): "paths.checkpoint",
    ("sample", "ckpt"): "paths.checkpoint",
    ("sample", "num"): "sample.num",
    ("sample", "length"): "sample.seq_len",
    ("sample", "steps"): "sample.steps",
    ("eval", "ckpt"): "paths.checkpoint",
    ("eval", "quad"): "eval.quad",
    ("eval", "draws"): "eval.draws",
}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    for (command, flag), key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if command == args.command and value is not None:
            overrides.append(f"{key}={value}")
    if args.command == "train" and args.data:
        overrides += ["data.kind=text", f"data.path={args.data}"]
    return RunConfig.from_file(args.config, overrides)


def run(args: argparse.Namespace):
    cfg = config_from_args(args)
    if args.command == "precompute":
        cmd_precompute(cfg)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "sample":
        cmd_sample(cfg)
    elif args.command == "eval":
        cmd_eval(cfg, args.data)
    else:
        cmd_diagnose(cfg, args.only)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else Config.LOG_LEVEL.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        Config.validate()
        run(args)
    except (ConfigError, DatasetError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantViolation, DomainError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (MissingArtifactError, ArtifactMismatchError, ArtifactFormatError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except SphereDiffError as e:
        # geometry errors (dimension mismatch, antipodes, degenerate flows)
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
