"""Command-line entry point: ``measure <command> [--config FILE] [--a.b=value ...]``.

Every command resolves a RunConfig from defaults, an optional JSON config file
and dotted flag overrides (flags win), then writes the resolved config, input
hashes and seeds into its run directory next to its outputs.

Exit codes: 0 ok, 1 contract failure (divergence, failed check), 2 bad input.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pydantic

from . import data, gradcheck, metrics, pipeline
from .losses import DegenerateBatchError
from .model import CheckpointError, TrainingDivergence, load_encoder, save_encoder
from .numerics import NumericsError, derive_seed
from .pipeline import RunConfig
from .staging import encode_epochs, load_staging, save_staging
from .stein import SteinError

log = logging.getLogger("measure")

OUT_ENV = "MEASURE_OUT"
EXIT_OK, EXIT_CONTRACT, EXIT_INPUT = 0, 1, 2
SEED_TAGS = ("encoder", "sampler", "augment", "torch", "info-probe", "staging-init", "staging-batches")


class UsageError(Exception):
    """Bad command-line input; maps to exit code 2."""


# --- config resolution ----------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: list[str]) -> dict[str, object]:
    """``--a.b=1 --c.d 2`` -> {"a.b": 1, "c.d": 2}; values are read as JSON when possible."""
    out: dict[str, object] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for --{key}")
            i += 1
            val = tokens[i]
        out[key.replace("-", "_")] = _parse_value(val)
        i += 1
    return out


def apply_overrides(doc: dict, overrides: dict[str, object]) -> dict:
    for dotted, value in overrides.items():
        node = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            elif not isinstance(nxt, dict):
                raise UsageError(f"--{dotted}: {p!r} is not a config section")
            node = nxt
        node[leaf] = value
    return doc


def resolve_config(config_path: str | None, overrides: dict[str, object]) -> RunConfig:
    doc = RunConfig().model_dump(mode="json")
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"missing config file {path}")
        try:
            file_doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from e
        apply_overrides(doc, _flatten(file_doc))
    apply_overrides(doc, overrides)
    return RunConfig.model_validate(doc)


def _flatten(doc: dict, prefix: str = "") -> dict[str, object]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def run_dir(cfg: RunConfig, explicit: str | None, command: str) -> Path:
    if explicit:
        path = Path(explicit)
    elif cfg.out_dir:
        path = Path(cfg.out_dir)
    else:
        path = Path(os.environ.get(OUT_ENV, "runs")) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_provenance(out: Path, cfg: RunConfig, inputs: dict[str, str], command: str) -> None:
    (out / "config.json").write_text(cfg.canonical_json() + "\n")
    prov = {
        "command": command,
        "inputs": {role: {"path": str(p), "git_blob_sha1": pipeline.git_blob_hash(p), "sha256": pipeline.sha256_file(p)}
                   for role, p in inputs.items()},
        "seed": cfg.seed,
        "synth_seed": cfg.synth.seed,
        "derived_seeds": {tag: derive_seed(cfg.seed, tag) for tag in SEED_TAGS},
    }
    (out / "provenance.json").write_text(json.dumps(prov, sort_keys=True, indent=2) + "\n")


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing {what} file {p}")
    return p


# --- commands -------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(args.out) if args.out else run_dir(cfg, args.out_dir, "gen-data") / "dataset.msd"
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = data.synth_generate(cfg.synth)
    data.write_dataset(ds, out)
    write_provenance(out.parent, cfg, {}, "gen-data")
    print(f"wrote {len(ds)} epochs from {len(ds.domain_ids)} domains to {out}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    data_path = _need(args.data, "data")
    ds = data.read_dataset(data_path)
    out = run_dir(cfg, args.out_dir, "pretrain")
    split = pipeline.fold_split(cfg, ds)
    res = pipeline.pretrain(cfg, ds, split, progress=_progress(cfg.optim.steps))
    save_encoder(out / "encoder.ckpt", res.encoder, cfg.seed, res.steps)
    pipeline.write_csv(out / "loss.csv", ["step", "loss", "contrastive", "entropy", "skipped"], res.loss_log)
    pipeline.write_csv(out / "info.csv", pipeline.INFO_COLUMNS, res.info_log)
    write_provenance(out, cfg, {"data": data_path}, "pretrain")
    print(f"encoder checkpoint: {out / 'encoder.ckpt'}")
    return EXIT_OK


def cmd_stage(cfg: RunConfig, args) -> int:
    data_path, enc_path = _need(args.data, "data"), _need(args.encoder, "encoder")
    ds = data.read_dataset(data_path)
    encoder, _ = load_encoder(enc_path)
    out = run_dir(cfg, args.out_dir, "stage")
    split = pipeline.fold_split(cfg, ds)
    feats = encode_epochs(encoder, ds.signals)
    res = pipeline.stage(cfg, ds, encoder, split, feats)
    save_staging(out / "staging.ckpt", res.model, pipeline.sha256_file(enc_path), cfg.seed, res.best_step)
    ev = pipeline.evaluate(res.model, ds, feats, split.test, cfg.staging.seq_len)
    pipeline.write_csv(out / "metrics.csv", pipeline.METRICS_COLUMNS, [ev.metrics_row(cfg.folds.fold_index)])
    pipeline.write_csv(out / "staging_history.csv", ["step", "loss", "val_kappa"], res.history)
    write_provenance(out, cfg, {"data": data_path, "encoder": enc_path}, "stage")
    print(f"staging checkpoint: {out / 'staging.ckpt'} (val kappa {res.best_val_kappa:.4f}, "
          f"test kappa {ev.report.kappa:.4f})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    data_path = _need(args.data, "data")
    enc_path, stg_path = _need(args.encoder, "encoder"), _need(args.staging, "staging")
    if args.fold is not None:
        cfg = cfg.model_copy(update={"folds": cfg.folds.model_copy(update={"fold_index": args.fold})})
    ds = data.read_dataset(data_path)
    encoder, _ = load_encoder(enc_path)
    model, header = load_staging(stg_path)
    if header.get("encoder_sha256") != pipeline.sha256_file(enc_path):
        raise CheckpointError("staging checkpoint was trained on a different encoder")
    out = run_dir(cfg, args.out_dir, "eval")
    split = pipeline.fold_split(cfg, ds)
    feats = encode_epochs(encoder, ds.signals)
    ev = pipeline.evaluate(model, ds, feats, split.test, model.cfg.seq_len)
    pipeline.write_csv(out / "metrics.csv", pipeline.METRICS_COLUMNS, [ev.metrics_row(cfg.folds.fold_index)])
    rows = [{"epoch": int(ds.k[w[-1]]), "domain": int(ds.d[w[-1]]), "y_true": int(t), "y_pred": int(p)}
            for w, t, p in zip(ev.windows, ev.y_true, ev.y_pred)]
    pipeline.write_csv(out / "hypnogram.csv", ["epoch", "domain", "y_true", "y_pred"], rows)
    write_provenance(out, cfg, {"data": data_path, "encoder": enc_path, "staging": stg_path}, "eval")
    r = ev.report
    print(f"fold {cfg.folds.fold_index}: kappa {r.kappa:.4f} acc {r.acc:.4f} macro-F1 {r.f1_macro:.4f}")
    return EXIT_OK


def cmd_info(cfg: RunConfig, args) -> int:
    data_path, enc_path = _need(args.data, "data"), _need(args.encoder, "encoder")
    ds = data.read_dataset(data_path)
    encoder, header = load_encoder(enc_path)
    out = run_dir(cfg, args.out_dir, "info")
    split = pipeline.fold_split(cfg, ds)
    rep = pipeline.information_diagnostics(encoder, ds, split.train, cfg)
    pipeline.write_csv(out / "info.csv", pipeline.INFO_COLUMNS, [rep.as_row(int(header.get("step", 0)))])
    (out / "info.json").write_text(json.dumps(rep.to_dict(), sort_keys=True, indent=2) + "\n")
    write_provenance(out, cfg, {"data": data_path, "encoder": enc_path}, "info")
    print(f"I(z;d) {rep.I_zd:.4f}  superfluous proxy {rep.superfluous_proxy:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = gradcheck.run_all(cfg.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CONTRACT


def cmd_ablate(cfg: RunConfig, args) -> int:
    data_path = _need(args.data, "data")
    ds = data.read_dataset(data_path)
    if len(ds.domain_ids) < 2:
        raise UsageError("need ≥ 2 domains")
    out = run_dir(cfg, args.out_dir, "ablate")
    seeds = [int(s) for s in args.seeds.split(",")]
    alphas = [float(a) for a in args.alphas.split(",")]

    def show(row):
        print(f"{row['name']:>14s} seed {row['seed']}: kappa {row['kappa']:.4f}  I_zd {row['I_zd']:.4f}", flush=True)

    rows = pipeline.run_ablation(cfg, ds, seeds, alphas, progress=show)
    pipeline.write_csv(out / "summary.csv", pipeline.ABLATION_COLUMNS, rows)
    means = []
    for name in dict.fromkeys(r["name"] for r in rows):
        group = [r for r in rows if r["name"] == name]
        means.append({"name": name, "alpha": group[0]["alpha"], "levels": group[0]["levels"], "n_seeds": len(group),
                      **{c: float(np.mean([g[c] for g in group])) for c in ("kappa", "acc", "f1_macro", "I_zd",
                                                                           "superfluous_proxy")}})
    pipeline.write_csv(out / "summary_mean.csv",
                       ["name", "alpha", "levels", "n_seeds", "kappa", "acc", "f1_macro", "I_zd", "superfluous_proxy"],
                       means)
    write_provenance(out, cfg, {"data": data_path}, "ablate")
    return EXIT_OK


def _progress(total: int):
    every = max(1, total // 10)

    def report(row):
        if row["step"] % every == 0 or row["step"] == total:
            log.info("step %d/%d loss %.4f", row["step"], total, row["loss"])

    return report


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "stage": cmd_stage,
    "eval": cmd_eval,
    "info": cmd_info,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="measure", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--out-dir", help=f"run directory (default ${OUT_ENV}/<command>)")
        if name == "gen-data":
            p.add_argument("--out", help="dataset path (default <run dir>/dataset.msd)")
        if name != "gen-data" and name != "gradcheck":
            p.add_argument("--data", help="MSD1 dataset file")
        if name in ("stage", "eval", "info"):
            p.add_argument("--encoder", help="encoder checkpoint")
        if name == "eval":
            p.add_argument("--staging", help="staging checkpoint")
            p.add_argument("--fold", type=int)
        if name == "ablate":
            p.add_argument("--seeds", default="0")
            p.add_argument("--alphas", default="0,1e-4,1e-3,1e-2,1e-1")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args.config, parse_overrides(rest))
        return COMMANDS[args.command](cfg, args)
    except (TrainingDivergence, DegenerateBatchError, metrics.MetricsError) as e:
        print(f"contract failure: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except (UsageError, FileNotFoundError, pydantic.ValidationError, data.DatasetFormatError,
            CheckpointError, SteinError, NumericsError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
