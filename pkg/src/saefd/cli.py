"""Command-line entry point: gen-data, train-sae, run-cl, ablate and report.

Every command reads one YAML config (``--config``) layered over built-in defaults, plus
``--set section.key=value`` overrides.  Exit codes: 0 success, 2 configuration or input
error, 3 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields

import numpy as np
import torch
import yaml

from .container import FormatError
from .lambda_ctl import read_trace_csv, start_end_per_task
from .model import BaseModel, batch_tensors, collect_activations, model_fingerprint, save_checkpoint
from .sae import GatedSae, SaeTrainConfig, encode, l0_sparsity, load_sae, save_sae, train_sae, variance_explained
from .synth import (ConfigError, GenConfig, InterferenceConfig, concat_batches, file_sha256,
                    generate_sae_corpus, generate_task_sequence, load_dataset, save_dataset)
from .trainer import RunConfig, run_sequence, write_run_outputs

log = logging.getLogger("saefd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# the synthetic stand-in for a transformer MLP layer: d_in=32 inputs, d=64 activations, D=8d features
DEFAULTS = {
    "data": {
        "seed": 0,
        "num_tasks": 4,
        "num_classes": 5,
        "d_in": 32,
        "seq_len_min": 4,
        "seq_len_max": 12,
        "train_size": 2000,
        "test_size": 500,
        "noise_sigma": 1.0,
        "prototype_scale": 1.0,
        "kappa": 0.2,
        "conflict_fraction": 0.6,
        "epochs": [5, 3, 7, 5],
        "corpus_extra_sources": 2,
        "corpus_samples_per_source": 2000,
    },
    "model": {"d": 64, "seed": 0, "weight_gain": 1.0},
    "sae": {
        "expansion": 8,
        "seed": 0,
        # 1e-3 leaves these activations (mean squared norm ~49) dense, L0 ~ 400 of 512
        "l1_coeff": 0.25,
        "lr": 3e-4,
        "epochs": 30,
        "batch_size": 128,
        "weight_decay": 0.0,
        "schedule": "cosine",
        "holdout_fraction": 0.1,
    },
    # library defaults follow the published settings; lr is rescaled for the small model
    "run": {**{f.name: copy.deepcopy(f.default) for f in fields(RunConfig)}, "lr": 5e-4},
    "ablate": {"grid": {}},
    "paths": {"corpus": "data/corpus.sfdd", "sae": "sae/sae.sfdm", "save_anchors": True},
}


# ---------------------------------------------------------------- configuration

def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and key != "grid":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for i, part in enumerate(parts):
        # grid entries are free-form; every other key must already exist
        if not isinstance(node, dict) or (part not in node and parts[i - 1:i] != ["grid"]):
            raise ConfigError(f"unknown config key {key!r}")
        if i < len(parts) - 1:
            node = node[part]
    try:
        node[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {exc}") from None


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    """Defaults, then the YAML file, then ``--set`` overrides; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path) as fh:
            try:
                loaded = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, loaded)
    for item in overrides or []:
        _apply_set(cfg, item)
    return cfg


def gen_config(cfg: dict) -> GenConfig:
    d = cfg["data"]
    try:
        return _gen_config(d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data: {exc}") from None


def _gen_config(d: dict) -> GenConfig:
    interference = InterferenceConfig(float(d["kappa"]), float(d["conflict_fraction"]))
    g = GenConfig(num_classes=int(d["num_classes"]), d_in=int(d["d_in"]), seq_len_min=int(d["seq_len_min"]),
                  seq_len_max=int(d["seq_len_max"]), train_size=int(d["train_size"]),
                  test_size=int(d["test_size"]), noise_sigma=float(d["noise_sigma"]),
                  prototype_scale=float(d["prototype_scale"]), interference=interference,
                  epochs=tuple(int(e) for e in d["epochs"]))
    g.validate(int(d["num_tasks"]))
    return g


def sae_train_config(cfg: dict) -> SaeTrainConfig:
    s = cfg["sae"]
    try:
        out = SaeTrainConfig(l1_coeff=float(s["l1_coeff"]), lr=float(s["lr"]), epochs=int(s["epochs"]),
                             batch_size=int(s["batch_size"]), weight_decay=float(s["weight_decay"]),
                             schedule=str(s["schedule"]))
        out.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sae: {exc}") from None
    if not 0.0 < float(s["holdout_fraction"]) < 1.0:
        raise ConfigError("sae.holdout_fraction must lie in (0, 1)")
    if int(s["expansion"]) < 2:
        raise ConfigError("sae.expansion must be >= 2")
    return out


def run_config(cfg: dict) -> RunConfig:
    rc = RunConfig(**cfg["run"])
    try:
        rc.validate(int(cfg["data"]["num_tasks"]))
    except TypeError as exc:
        raise ConfigError(f"run: {exc}") from None
    return rc


def build_sequence(cfg: dict):
    return generate_task_sequence(int(cfg["data"]["num_tasks"]), gen_config(cfg), int(cfg["data"]["seed"]))


def build_model(cfg: dict) -> BaseModel:
    m = cfg["model"]
    return BaseModel(int(cfg["data"]["d_in"]), int(m["d"]), seed=int(m["seed"]),
                     weight_gain=float(m["weight_gain"]))


def token_activations(model: BaseModel, batch, chunk: int = 2048) -> torch.Tensor:
    """Per-token activations of the frozen base model over every non-padding position."""
    out = []
    for i in range(0, len(batch), chunk):
        x, m, _ = batch_tensors(batch.subset(np.arange(i, min(i + chunk, len(batch)))))
        out.append(collect_activations(model, None, x, m)[m > 0])
    return torch.cat(out)


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: dict, out: str) -> dict:
    seq = build_sequence(cfg)
    d = cfg["data"]
    corpus = generate_sae_corpus(seq, int(d["corpus_extra_sources"]), int(d["corpus_samples_per_source"]),
                                 int(d["seed"]))
    os.makedirs(out, exist_ok=True)
    files = {}
    for t, spec in enumerate(seq.tasks):
        name = f"task_{spec.task_id}.sfdd"
        save_dataset(concat_batches([seq.train[t], seq.test[t]]), os.path.join(out, name))
        files[name] = file_sha256(os.path.join(out, name))
    save_dataset(corpus, os.path.join(out, "corpus.sfdd"))
    files["corpus.sfdd"] = file_sha256(os.path.join(out, "corpus.sfdd"))
    manifest = {"seed": int(d["seed"]), "num_tasks": len(seq), "train_size": int(d["train_size"]),
                "test_size": int(d["test_size"]), "corpus_size": len(corpus), "files": files}
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return manifest


def cmd_train_sae(cfg: dict, out: str) -> dict:
    train_cfg = sae_train_config(cfg)
    corpus_path = cfg["paths"]["corpus"]
    if not os.path.exists(corpus_path):
        raise ConfigError(f"corpus file not found: {corpus_path} (run gen-data first)")
    corpus = load_dataset(corpus_path)
    model = build_model(cfg)
    if corpus.inputs.shape[2] != model.d_in:
        raise ConfigError(f"corpus d_in {corpus.inputs.shape[2]} != model d_in {model.d_in}")
    n_hold = max(1, int(round(float(cfg["sae"]["holdout_fraction"]) * len(corpus))))
    train_part = token_activations(model, corpus.subset(np.arange(len(corpus) - n_hold)))
    hold_part = token_activations(model, corpus.subset(np.arange(len(corpus) - n_hold, len(corpus))))
    d = model.activation_dim
    sae = GatedSae(d, int(cfg["sae"]["expansion"]) * d, seed=int(cfg["sae"]["seed"]))
    t0 = time.perf_counter()
    train_sae(sae, train_part, train_cfg, seed=int(cfg["sae"]["seed"]), holdout=hold_part, log_every=5)
    seconds = time.perf_counter() - t0
    os.makedirs(out, exist_ok=True)
    save_sae(sae, os.path.join(out, "sae.sfdm"))
    with torch.no_grad():
        l0 = l0_sparsity(encode(sae, hold_part))
        row_dev = float((sae.W_dec.norm(dim=1) - 1.0).abs().max())
    report = {"variance_explained": variance_explained(sae, hold_part), "l0": l0,
              "l0_fraction": l0 / sae.D, "d": d, "D": sae.D, "train_tokens": int(train_part.shape[0]),
              "holdout_tokens": int(hold_part.shape[0]), "decoder_row_norm_max_dev": row_dev,
              "base_model_fingerprint": model_fingerprint(model),
              "checkpoint_sha256": file_sha256(os.path.join(out, "sae.sfdm")), "train_seconds": seconds}
    _write_json(os.path.join(out, "sae_report.json"), report)
    return report


def _load_sae_for(cfg: dict, rc: RunConfig, model: BaseModel) -> GatedSae | None:
    path = cfg["paths"]["sae"]
    needs = rc.mode in ("saefd", "fixed_lambda", "cosine_only", "magnitude_only")
    if not path or not os.path.exists(path):
        if needs:
            raise ConfigError(f"mode {rc.mode} needs an SAE checkpoint; not found at {path!r}")
        return None
    sae = load_sae(path)
    if sae.d != model.activation_dim:
        raise ConfigError(f"SAE width d={sae.d} does not match model d={model.activation_dim}")
    return sae


def cmd_run_cl(cfg: dict, seed: int, out: str) -> dict:
    rc = run_config(cfg)
    model = build_model(cfg)
    sae = _load_sae_for(cfg, rc, model)
    seq = build_sequence(cfg)
    if cfg["paths"]["save_anchors"] and rc.uses_anchors and not rc.anchor_dir:
        rc.anchor_dir = os.path.join(out, "anchors")
    result = run_sequence(rc, seed, seq, model, sae)
    echo = {"seed": seed, "run": asdict(rc), "data": cfg["data"], "model": cfg["model"],
            "sae_path": cfg["paths"]["sae"] if sae is not None else None}
    write_run_outputs(result, out, echo)
    save_checkpoint(os.path.join(out, "model.sfdm"), model, result.adapter, result.heads)
    return result.summary()


def grid_cells(grid: dict) -> list[dict]:
    if not grid:
        return []
    for key, values in grid.items():
        if key not in DEFAULTS["run"]:
            raise ConfigError(f"ablate.grid key {key!r} is not a run setting")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"ablate.grid.{key} must be a nonempty list")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _cell_name(i: int, cell: dict) -> str:
    return f"cell{i:02d}_" + "_".join(f"{k}-{v}" for k, v in cell.items())


def _run_cell(args):
    cfg, cell, seed, out = args
    torch.set_num_threads(1)
    cfg = copy.deepcopy(cfg)
    cfg["run"].update(cell)
    return cmd_run_cl(cfg, seed, out)


def cmd_ablate(cfg: dict, seed: int, out: str, jobs: int = 1) -> list[dict]:
    cells = grid_cells(cfg["ablate"]["grid"])
    if not cells:
        log.info("empty ablation grid; nothing to do")
        return []
    for cell in cells:
        run_config(_merge(cfg, {"run": cell}))
    os.makedirs(out, exist_ok=True)
    work = [(cfg, cell, seed, os.path.join(out, _cell_name(i, cell))) for i, cell in enumerate(cells)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_run_cell, work))
    else:
        summaries = [_run_cell(w) for w in work]
    keys = list(cfg["ablate"]["grid"])
    rows = []
    with open(os.path.join(out, "combined.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell"] + keys + ["AA", "BWT"])
        for i, (cell, s) in enumerate(zip(cells, summaries)):
            row = {"cell": _cell_name(i, cell), **cell, "AA": s["AA"], "BWT": s.get("BWT", float("nan"))}
            rows.append(row)
            w.writerow([row["cell"]] + [cell[k] for k in keys] + [f"{row['AA']:.2f}", f"{row['BWT']:.2f}"])
    return rows


def _find_runs(paths: list[str]) -> list[str]:
    found = []
    for p in paths:
        if os.path.isfile(os.path.join(p, "summary.json")):
            found.append(p)
            continue
        if not os.path.isdir(p):
            raise ConfigError(f"run directory not found: {p}")
        for root, _, names in sorted(os.walk(p)):
            if "summary.json" in names:
                found.append(root)
    if not found:
        raise ConfigError("no run directories with summary.json found")
    return sorted(found)


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else float("nan")
    return float(arr.mean()), std


def cmd_report(run_dirs: list[str], out: str) -> list[dict]:
    """Aggregate seed replicates (mean, sample std) and emit lambda and VE series per run."""
    runs = _find_runs(run_dirs)
    groups: dict[str, list[dict]] = {}
    for r in runs:
        with open(os.path.join(r, "summary.json")) as fh:
            s = json.load(fh)
        s["_dir"] = r
        echo = copy.deepcopy(s.get("config", {}))
        # replicates differ only in seed and in where their outputs went
        echo.pop("seed", None)
        echo.get("run", {}).pop("anchor_dir", None)
        groups.setdefault(json.dumps(echo, sort_keys=True), []).append(s)
    os.makedirs(out, exist_ok=True)
    agg_rows = []
    for members in groups.values():
        aa_mean, aa_std = _mean_std([m["AA"] for m in members])
        bwt = [m["BWT"] for m in members if "BWT" in m]
        bwt_mean, bwt_std = _mean_std(bwt) if bwt else (float("nan"), float("nan"))
        agg_rows.append({"mode": members[0]["mode"], "n_runs": len(members),
                         "seeds": " ".join(str(m["seed"]) for m in members),
                         "AA_mean": aa_mean, "AA_std": aa_std, "BWT_mean": bwt_mean, "BWT_std": bwt_std,
                         "runs": " ".join(m["_dir"] for m in members)})
    with open(os.path.join(out, "aggregate.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(agg_rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(agg_rows)
    with open(os.path.join(out, "lambda_dynamics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "task_id", "lambda_start", "lambda_end"])
        for r in runs:
            trace_path = os.path.join(r, "lambda_trace.csv")
            if os.path.exists(trace_path):
                for task_id, start, end in start_end_per_task(read_trace_csv(trace_path)):
                    w.writerow([r, task_id, f"{start:.4f}", f"{end:.4f}"])
    with open(os.path.join(out, "ve_drift.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "after_task", "variance_explained"])
        for r in runs:
            ve_path = os.path.join(r, "ve_drift.csv")
            if os.path.exists(ve_path):
                with open(ve_path) as vf:
                    for row in csv.DictReader(vf):
                        w.writerow([r, row["after_task"], row["variance_explained"]])
    return agg_rows


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saefd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_required):
        p.add_argument("--config", help="YAML config file layered over the defaults")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config entry, e.g. --set run.mode=seq_only (repeatable)")
        p.add_argument("--seed", type=int, required=seed_required)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("gen-data", help="generate task datasets and the SAE corpus"), True)
    common(sub.add_parser("train-sae", help="train the gated SAE on base-model activations"), False)
    common(sub.add_parser("run-cl", help="run one continual-learning sequence"), True)
    p = sub.add_parser("ablate", help="run a grid of run settings")
    common(p, True)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p = sub.add_parser("report", help="aggregate finished runs")
    p.add_argument("runs", nargs="+", help="run directories (searched recursively)")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        if args.command == "report":
            result = cmd_report(args.runs, args.out)
        else:
            cfg = load_config(args.config, args.set)
            if args.command == "gen-data":
                cfg["data"]["seed"] = args.seed
                result = cmd_gen_data(cfg, args.out)
            elif args.command == "train-sae":
                if args.seed is not None:
                    cfg["sae"]["seed"] = args.seed
                result = cmd_train_sae(cfg, args.out)
            elif args.command == "run-cl":
                result = cmd_run_cl(cfg, args.seed, args.out)
            else:
                if args.jobs < 1:
                    raise ConfigError("--jobs must be >= 1")
                result = cmd_ablate(cfg, args.seed, args.out, args.jobs)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
