"""Command-line entry point: train, sample, sensitivity, variants, pfode-check,
depth-scaling. Every command writes CSV tables (the source of truth), static
SVG plots rendered from those tables, and a run manifest with content hashes.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NonFiniteError, forward_op
from .config import ConfigError, load_config
from .datasets import DatasetSpec, oracle_for, sample_dataset
from .dynamics import (DiscreteSchedule, OuSchedule, VeSchedule, VpSchedule,
                       make_rng, sde_vs_pfode_marginal_check)
from .metrics import eval_generated, sample_reverse
from .residual import ScoreNet, StackModel, with_pinned_gates
from .sensitivity import sensitivity_report
from .svgplot import line_plot
from .training import (Checkpoint, DivergenceError, TrainSettings, arch_of,
                       ema_model, eval_score_loss, finetune_gates,
                       load_checkpoint, load_params, model_from_arch,
                       save_checkpoint, train_score_model)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


# ---- run directories, CSV, manifests -----------------------------------------


def _out_root() -> Path:
    return Path(os.environ.get("NRDM_OUT_ROOT", "runs"))


def _make_run_dir(args, command: str) -> Path:
    if args.out:
        run_dir = Path(args.out)
        if (run_dir / "manifest.json").exists():
            raise ConfigError(
                f"refusing to reuse {run_dir}: it already holds a completed run")
        run_dir.mkdir(parents=True, exist_ok=True)
        return run_dir
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    run_dir = _out_root() / f"{stamp}-{command}-s{args.seed}"
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_dir


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k, "")) for k in fieldnames})


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class RunContext:
    def __init__(self, args, command: str, cfg: dict):
        self.command = command
        self.cfg = {k: v for k, v in cfg.items() if not k.startswith("_")}
        self.seed = args.seed
        self.run_dir = _make_run_dir(args, command)
        self.started = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self.outputs: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.run_dir / name
        self.outputs.append(p)
        return p

    def finish(self) -> None:
        manifest = {
            "artifact_version": __version__,
            "command": self.command,
            "config": self.cfg,
            "seed": self.seed,
            "started_utc": self.started,
            "finished_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "outputs": [
                {"path": p.name, "sha256": _sha256(p), "bytes": p.stat().st_size}
                for p in self.outputs if p.exists()
            ],
        }
        tmp = self.run_dir / "manifest.json.tmp"
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, self.run_dir / "manifest.json")


# ---- builders -----------------------------------------------------------------


def build_schedule(cfg: dict):
    s = cfg["schedule"]
    if s["kind"] == "vp":
        return VpSchedule(s["beta_min"], s["beta_max"])
    if s["kind"] == "ve":
        return VeSchedule(s["sigma_min"], s["sigma_max"])
    if s["kind"] == "ou":
        return OuSchedule(s["rate"])
    raise ConfigError(f"unknown schedule kind {s['kind']!r}")


def build_dataset_spec(cfg: dict) -> DatasetSpec:
    d = cfg["data"]
    return DatasetSpec(family=d["family"], size=d["size"], noise=d["noise"],
                       weights=d["weights"], means=d["means"],
                       variances=d["variances"], n_classes=d["n_classes"])


def build_data_source(cfg: dict):
    """ScoreOracle when the family admits one, else a sampling callable."""
    spec = build_dataset_spec(cfg)
    if spec.family == "gaussian-mixture-2d":
        return oracle_for(spec)

    def sample(n, rng):
        return sample_dataset(spec, n, int(rng.integers(0, 2 ** 31)))[0]

    return sample


def build_model(cfg: dict, seed: int, variant: str | None = None,
                depth: int | None = None) -> ScoreNet:
    m = cfg["model"]
    spec = build_dataset_spec(cfg)
    rng = make_rng(seed + 10_000)
    stack = StackModel.build(
        m["fashion"], depth or m["depth"], m["width"], m["mapper"],
        variant=variant or m["variant"], gate_mode=m["gate_mode"],
        conditioning=m["conditioning"], activation=m["activation"],
        hidden=m["hidden"] or None, out_scale=m["mapper_out_scale"],
        alpha_init=m["alpha_init"], beta_init=m["beta_init"], rng=rng)
    return ScoreNet(spec.dim, stack, rng=rng, out_scale=m["out_scale"])


def build_settings(cfg: dict, steps: int | None = None, gamma: float | None = None
                   ) -> TrainSettings:
    t = cfg["train"]
    try:
        return TrainSettings(
            steps=steps if steps is not None else t["steps"], batch=t["batch"],
            lr=t["lr"], optimizer=t["optimizer"], weight_decay=t["weight_decay"],
            gamma=gamma if gamma is not None else t["gamma"],
            ema_decay=t["ema_decay"], objective=t["objective"],
            score_target=t["score_target"], t_min=t["t_min"],
            log_every=t["log_every"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _validate_train_cfg(cfg: dict) -> None:
    if cfg["train"]["score_target"] == "analytic-oracle" \
            and cfg["data"]["family"] != "gaussian-mixture-2d":
        raise ConfigError(
            "train.score_target=analytic-oracle requires data.family=gaussian-mixture-2d "
            "(set train.score_target=denoising-estimate for other families)")


LOG_FIELDS = ["step", "loss", "score_term", "gamma_term", "lr", "ema_decay"]
SENS_FIELDS = ["series", "step", "depth", "alpha", "beta", "sensitivity_norm", "normalized"]


def _run_training(cfg: dict, seed: int, variant: str | None = None,
                  depth: int | None = None, steps: int | None = None,
                  gamma: float | None = None):
    _validate_train_cfg(cfg)
    model = build_model(cfg, seed, variant=variant, depth=depth)
    schedule = build_schedule(cfg)
    data = build_data_source(cfg)
    settings = build_settings(cfg, steps=steps, gamma=gamma)
    freeze = cfg["train"]["freeze"]
    if freeze == "theta":
        result = finetune_gates(model, schedule, data, settings, seed=seed,
                                report_every=cfg["train"]["report_every"])
    elif freeze == "gates":
        only = set(model.params()) - model.gate_names()
        result = train_score_model(model, schedule, data, settings, seed=seed, only=only,
                                   report_every=cfg["train"]["report_every"])
    elif freeze == "none":
        result = train_score_model(model, schedule, data, settings, seed=seed,
                                   report_every=cfg["train"]["report_every"])
    else:
        raise ConfigError(f"unknown train.freeze mode {freeze!r}")
    return model, schedule, data, settings, result


# ---- commands -------------------------------------------------------------------


def cmd_train(args, cfg) -> int:
    ctx = RunContext(args, "train", cfg)
    model, schedule, data, settings, result = _run_training(cfg, args.seed)
    _write_csv(ctx.path("metrics.csv"), LOG_FIELDS, result.log)
    if result.reports:
        rows = []
        for rep in result.reports:
            for r in rep.rows():
                rows.append({"series": "gated", **r})
        _write_csv(ctx.path("sensitivity.csv"), SENS_FIELDS, rows)
    ckpt = Checkpoint(arch={"model": arch_of(model), "config": ctx.cfg},
                      params=model.params(), opt=result.opt, ema=result.ema,
                      seed=args.seed, step=settings.steps)
    save_checkpoint(ctx.path("checkpoint.nrdm"), ckpt)
    if result.log:
        xs = [r["step"] for r in result.log]
        svg = line_plot(
            [{"label": "loss", "x": xs, "y": [r["loss"] for r in result.log]},
             {"label": "score_term", "x": xs, "y": [r["score_term"] for r in result.log]}],
            title="training loss", xlabel="step", ylabel="loss", log_y=True)
        ctx.path("metrics.svg").write_text(svg)
    ctx.finish()
    return EXIT_OK


def _load_model_for_eval(args, cfg):
    """Model plus effective config from a checkpoint (EMA parameters when present)."""
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_arch(ckpt.arch["model"])
    load_params(model, ckpt.params)
    if ckpt.ema is not None:
        load_params(model, ckpt.ema.shadow)
    eff_cfg = ckpt.arch.get("config") or cfg
    return model, eff_cfg, ckpt


def cmd_sample(args, cfg) -> int:
    if args.solver not in ("euler", "heun"):
        raise ConfigError(f"unknown solver {args.solver!r}")
    if args.n <= 0:
        raise ConfigError(f"sample count must be positive, got {args.n}")
    ctx = RunContext(args, "sample", cfg)
    model, eff_cfg, _ = _load_model_for_eval(args, cfg)
    schedule = build_schedule(eff_cfg)
    data = build_data_source(eff_cfg)
    gen = sample_reverse(model, schedule, args.n, model.dim, args.solver,
                         args.steps, args.seed)
    fields = [f"x{i}" for i in range(gen.shape[1])]
    _write_csv(ctx.path("samples.csv"), fields,
               [dict(zip(fields, row)) for row in gen.tolist()])
    report = eval_generated(model, schedule, data, args.n, args.solver,
                            args.steps, args.seed,
                            n_projections=eff_cfg["eval"]["n_projections"],
                            bandwidth=eff_cfg["eval"]["bandwidth"] or None)
    _write_csv(ctx.path("metrics.csv"), ["sw", "mmd", "hist_kl", "n", "seed"],
               [report.row()])
    ctx.finish()
    return EXIT_OK


def cmd_sensitivity(args, cfg) -> int:
    ctx = RunContext(args, "sensitivity", cfg)
    if args.checkpoint:
        model, eff_cfg, ckpt = _load_model_for_eval(args, cfg)
        step = ckpt.step
    else:
        model, eff_cfg, step = build_model(cfg, args.seed), cfg, 0
    spec = build_dataset_spec(eff_cfg)
    batch, _ = sample_dataset(spec, 256, args.seed + 1)

    def sq_loss(out):
        return forward_op("sum", [forward_op("square", [out])])

    rows = []
    series = [("gated", model)]
    if eff_cfg["report"]["ungated"]:
        series.append(("ungated", with_pinned_gates(model)))
    for label, mdl in series:
        rep = sensitivity_report(mdl, batch, sq_loss, step=step, t=0.5)
        rows.extend({"series": label, **r} for r in rep.rows())
    _write_csv(ctx.path("sensitivity.csv"), SENS_FIELDS, rows)
    plot = [{"label": label,
             "x": [r["depth"] for r in rows if r["series"] == label],
             "y": [r["normalized"] for r in rows if r["series"] == label]}
            for label in dict.fromkeys(r["series"] for r in rows)]
    ctx.path("sensitivity.svg").write_text(line_plot(
        plot, title="normalized sensitivity by depth", xlabel="depth",
        ylabel="normalized |dL/dz|"))
    ctx.finish()
    return EXIT_OK


def _variant_worker(payload):
    cfg, variant, seed = payload
    model, schedule, data, settings, result = _run_training(cfg, seed, variant=variant)
    final = result.log[-1] if result.log else {"loss": float("nan"), "score_term": float("nan")}
    em = ema_model(model, result.ema)
    rep = eval_generated(em, schedule, data, cfg["eval"]["n_samples"],
                         cfg["eval"]["solver"], cfg["eval"]["steps"], seed)
    return {"variant": variant, "seed": seed, "steps": settings.steps,
            "final_loss": final["loss"], "sw": rep.sliced_wasserstein, "mmd": rep.mmd}


def cmd_variants(args, cfg) -> int:
    ctx = RunContext(args, "variants", cfg)
    seeds = cfg["report"]["seeds"]
    jobs = [(ctx.cfg, v, int(s)) for v in ("v0", "v1", "v2", "v3", "v4") for s in seeds]
    rows = _run_jobs(_variant_worker, jobs, args.jobs)
    _write_csv(ctx.path("variants.csv"),
               ["variant", "seed", "steps", "final_loss", "sw", "mmd"], rows)
    by_variant: dict[str, list] = {}
    for r in rows:
        by_variant.setdefault(r["variant"], []).append(r["sw"])
    ctx.path("variants.svg").write_text(line_plot(
        [{"label": "mean sw", "x": list(range(5)),
          "y": [float(np.mean(by_variant[v])) for v in ("v0", "v1", "v2", "v3", "v4")]}],
        title="variant comparison (x: v0..v4)", xlabel="variant", ylabel="sliced W1"))
    ctx.finish()
    return EXIT_OK


def cmd_pfode_check(args, cfg) -> int:
    if "schedule" not in cfg.get("_sections_present", []):
        raise ConfigError("pfode-check requires an explicit [schedule] section "
                          "in the config file")
    ctx = RunContext(args, "pfode-check", cfg)
    schedule = build_schedule(cfg)
    spec = build_dataset_spec(cfg)
    if spec.family != "gaussian-mixture-2d":
        raise ConfigError("pfode-check needs the gaussian-mixture-2d family "
                          "(an analytic score oracle)")
    oracle = oracle_for(spec)
    n = cfg["eval"]["n_samples"]
    t_grid = np.linspace(0.05, 1.0, cfg["eval"]["t_grid_points"])
    report = sde_vs_pfode_marginal_check(oracle, schedule, n, t_grid,
                                         seed=args.seed,
                                         substeps=cfg["eval"]["substeps"])
    tol = 3.0 * np.sqrt(2.0 / n) + 2.0 / (cfg["eval"]["substeps"]
                                          * cfg["eval"]["t_grid_points"])
    rows = [{**r, "tolerance": float(tol)} for r in report.rows()]
    _write_csv(ctx.path("pfode_check.csv"),
               ["t", "mean_discrepancy", "cov_discrepancy", "tolerance"], rows)
    ctx.path("pfode_check.svg").write_text(line_plot(
        [{"label": "mean", "x": report.times.tolist(),
          "y": report.mean_discrepancy.tolist()},
         {"label": "cov", "x": report.times.tolist(),
          "y": report.cov_discrepancy.tolist()}],
        title="SDE vs PF-ODE marginal discrepancy", xlabel="t", ylabel="max abs gap"))
    ctx.finish()
    return EXIT_OK


def _depth_worker(payload):
    cfg, depth, gated, seed = payload
    variant = "v0" if gated else "v3"
    model, schedule, data, settings, result = _run_training(
        cfg, seed, variant=variant, depth=depth)
    final = result.log[-1] if result.log else {"loss": float("nan"), "score_term": float("nan")}
    return {"depth": depth, "gates": "gated" if gated else "ungated", "seed": seed,
            "steps": settings.steps, "final_loss": final["loss"],
            "final_score_term": final["score_term"],
            "final_eval_loss": eval_score_loss(model, schedule, data, settings)}


def cmd_depth_scaling(args, cfg) -> int:
    ctx = RunContext(args, "depth-scaling", cfg)
    depths = [int(d) for d in args.depths.split(",")] if args.depths \
        else list(cfg["report"]["depths"])
    jobs = [(ctx.cfg, d, gated, args.seed) for d in depths for gated in (True, False)]
    rows = _run_jobs(_depth_worker, jobs, args.jobs)
    _write_csv(ctx.path("depth_scaling.csv"),
               ["depth", "gates", "seed", "steps", "final_loss", "final_score_term",
                "final_eval_loss"], rows)
    ctx.path("depth_scaling.svg").write_text(line_plot(
        [{"label": label,
          "x": [r["depth"] for r in rows if r["gates"] == label],
          "y": [r["final_loss"] for r in rows if r["gates"] == label]}
         for label in ("gated", "ungated")],
        title="final loss by depth", xlabel="depth", ylabel="final loss", log_y=True))
    ctx.finish()
    return EXIT_OK


def _run_jobs(worker, payloads, jobs: int) -> list[dict]:
    if jobs <= 1:
        return [worker(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, payloads))


# ---- argument parsing --------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nrdm",
        description="gated residual diffusion laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out", default=None, help="run directory (default: timestamped)")
        return p

    common(sub.add_parser("train", help="train a score model"))
    p = common(sub.add_parser("sample", help="sample via the reverse flow"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--solver", default="heun")
    p.add_argument("--steps", type=int, default=200)
    p = common(sub.add_parser("sensitivity", help="per-depth sensitivity profile"))
    p.add_argument("--checkpoint", default=None)
    common(sub.add_parser("variants", help="train residual variants v0..v4"))
    common(sub.add_parser("pfode-check", help="SDE vs PF-ODE marginal check"))
    p = common(sub.add_parser("depth-scaling", help="gated vs ungated across depths"))
    p.add_argument("--depths", default=None, help="comma-separated depth list")
    return parser


_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "sensitivity": cmd_sensitivity,
    "variants": cmd_variants,
    "pfode-check": cmd_pfode_check,
    "depth-scaling": cmd_depth_scaling,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if cfg["schedule"]["table"]:
            try:
                DiscreteSchedule.from_csv(cfg["schedule"]["table"])
            except (OSError, ValueError) as exc:
                raise ConfigError(f"schedule table: {exc}") from exc
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"nrdm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"nrdm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
