"""Command line: gen-data, train, eval, export-prompts, report."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from . import federation as fed
from .config import ABLATION_MODES, Ablation, RunConfig
from .data import ClientDataset, DatasetError, gen_synthetic, total_variation, write_jsonl
from .model import (
    TOWERS,
    AnswerHead,
    Backbone,
    ConfigError,
    InputError,
    PromptSet,
    count_params,
    read_prompt,
    read_tensor,
    write_prompt,
    write_tensor,
)

log = logging.getLogger("pflsim")

HISTORY = "history.csv"
MANIFEST = "manifest.json"
CONFIG = "config.ini"
CHECKPOINTS = "checkpoints"
EVAL_FIELDS = ("client", "n_test", "test_acc")
REPORT_FIELDS = ("mode", "client", "n_runs", "mean_test_acc", "std_test_acc")

# settings a report may legitimately vary across the runs it pools
_REPORT_FREE_KEYS = {("run", "seed"), ("run", "output_dir")}


class CliError(Exception):
    pass


def setup_logging() -> None:
    level = os.environ.get("PFLSIM_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError(f"PFLSIM_LOG must be one of error|info|debug, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("pflsim").setLevel(levels[level])


def resolve_config(args) -> RunConfig:
    """Config file (or defaults), then --set overrides, then dedicated flags."""
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.default_config()
    overrides: dict[str, dict[str, str]] = {}
    for item in getattr(args, "set", None) or []:
        section, key, value = cfgmod.parse_override(item)
        overrides.setdefault(section, {})[key] = value
    if overrides:
        cfg = cfgmod.apply_overrides(cfg, overrides)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "ablation", None):
        cfg = replace(cfg, ablation=Ablation.from_mode(args.ablation))
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg: RunConfig) -> list[Path]:
    spec = cfg.data.synth
    if cfg.data.source != "synth":
        raise ConfigError("gen-data needs data.source = synth")
    spec.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets, _ = gen_synthetic(spec)
    paths = []
    for t, ds in enumerate(datasets):
        p = out / f"client{t}.jsonl"
        write_jsonl(p, ds)
        paths.append(p)
    marginals = [ds.label_distribution() for ds in datasets]
    _write_json(out / MANIFEST, {
        "synth": spec.to_dict(),
        "files": [p.name for p in paths],
        "counts": [len(ds) for ds in datasets],
        "label_marginals": [m.tolist() for m in marginals],
        "label_tv": [[total_variation(a, b) for b in marginals] for a in marginals],
    })
    log.info("wrote %d client files to %s", len(paths), out)
    return paths


# ---------------------------------------------------------------------------
# train


def write_checkpoints(ckpt: Path, clients: Sequence[fed.ClientState]) -> None:
    ckpt.mkdir(parents=True, exist_ok=True)
    for c in clients:
        for t in TOWERS:
            write_prompt(ckpt / f"client{c.id}_{t}_local.bin", c.local[t], c.id)
            write_prompt(ckpt / f"client{c.id}_{t}_shared.bin", c.shared[t], c.id)
        for name, arr in c.head.arrays().items():
            write_tensor(ckpt / f"client{c.id}_head_{name}.bin", arr,
                         {"client": c.id, "name": name, "dropout": c.head.dropout})


def read_checkpoint(ckpt: Path, client: int) -> tuple[dict[str, PromptSet], dict[str, PromptSet], AnswerHead]:
    local, shared, head = {}, {}, {}
    try:
        for t in TOWERS:
            local[t] = read_prompt(ckpt / f"client{client}_{t}_local.bin")[1]
            shared[t] = read_prompt(ckpt / f"client{client}_{t}_shared.bin")[1]
        dropout = 0.0
        for name in ("w1", "b1", "w2", "b2"):
            header, head[name] = read_tensor(ckpt / f"client{client}_head_{name}.bin")
            dropout = header.get("dropout", dropout)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint for client {client} is incomplete: missing {exc.filename}") from exc
    return local, shared, AnswerHead(**head, dropout=dropout)


def _manifest(cfg: RunConfig, datasets, history: fed.RunHistory, status: str, backbone_hash: str) -> dict:
    n_answers = [d.train.n_answers for d in datasets]
    acct = count_params(cfg.model, len(cfg.ablation.prompted_towers()), n_answers)
    per_round = history.rounds[0].payload_bytes if history.rounds else 0
    return {
        "status": status,
        "seed": cfg.seed,
        "mode": cfg.ablation.mode,
        "config": cfgmod.to_text(cfg),
        "clients": [{"train": len(d.train), "val": len(d.val), "test": len(d.test), "n_answers": n}
                    for d, n in zip(datasets, n_answers)],
        "payload": {
            **acct.as_dict(),
            "bytes_per_round": per_round,
            "rounds": len(history.rounds),
            "total_bytes": sum(r.payload_bytes for r in history.rounds),
        },
        "backbone_sha256": backbone_hash,
        "eta": [{"epoch": r.epoch, "matrix": r.eta, "degenerate": r.degenerate} for r in history.rounds],
        "final_test_acc": {str(k): v for k, v in history.final_test_acc().items()},
    }


def cmd_train(cfg: RunConfig, threads: int = 1) -> fed.RunResult:
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG).write_text(cfgmod.to_text(cfg))
    datasets = fed.prepare_datasets(cfg)
    backbone = Backbone.init(cfg.model, cfg.seed)
    bb_hash = backbone.content_hash()

    def persist(history: fed.RunHistory) -> None:
        (out / HISTORY).write_text(history.to_csv())

    log.info("training mode %s seed %d -> %s", cfg.ablation.mode, cfg.seed, out)
    try:
        result = fed.run(cfg, datasets, threads=threads, on_epoch=persist, backbone=backbone)
    except fed.RunAborted as exc:
        persist(exc.history)
        _write_json(out / MANIFEST, {**_manifest(cfg, datasets, exc.history, "aborted", bb_hash), "error": str(exc)})
        raise
    if backbone.content_hash() != bb_hash:
        raise RuntimeError("backbone weights changed during training")
    persist(result.history)
    write_checkpoints(out / CHECKPOINTS, result.clients)
    _write_json(out / MANIFEST, _manifest(cfg, datasets, result.history, "complete", bb_hash))
    return result


# ---------------------------------------------------------------------------
# eval / export


def _run_config(run_dir: Path, config_path: str | None) -> RunConfig:
    path = Path(config_path) if config_path else run_dir / CONFIG
    if not path.is_file():
        raise CliError(f"no config at {path}")
    return cfgmod.load(path)


def cmd_eval(run_dir: str | Path, config_path: str | None = None, out: str | Path | None = None) -> list[dict]:
    run_dir = Path(run_dir)
    cfg = _run_config(run_dir, config_path)
    datasets = fed.prepare_datasets(cfg)
    backbone = Backbone.init(cfg.model, cfg.seed)
    rows = []
    for t, splits in enumerate(datasets):
        local, shared, head = read_checkpoint(run_dir / CHECKPOINTS, t)
        client = fed.ClientState(id=t, local=local, shared=shared, head=head,
                                 answer_vocab=list(range(head.n_answers)), data=splits,
                                 rng=np.random.default_rng(0))
        acc = fed.evaluate(client, "test", backbone, cfg.ablation)
        rows.append({"client": t, "n_test": len(splits.test), "test_acc": acc})
    text = _csv(EVAL_FIELDS, rows)
    (Path(out) if out else run_dir / "eval.csv").write_text(text)
    print(text, end="")
    return rows


def cmd_export_prompts(run_dir: str | Path, out_dir: str | Path) -> list[Path]:
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    cfg = _run_config(run_dir, None)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, n_answers = [], []
    for t in range(cfg.n_clients):
        local, shared, head = read_checkpoint(run_dir / CHECKPOINTS, t)
        n_answers.append(head.n_answers)
        for tower in TOWERS:
            for p in (local[tower], shared[tower]):
                path = out_dir / f"client{t}_{tower}_{p.kind}.bin"
                write_prompt(path, p, t)
                written.append(path)
    acct = count_params(cfg.model, 2, n_answers)
    _write_json(out_dir / "params.json", {**acct.as_dict(), "files": [p.name for p in written]})
    return written


# ---------------------------------------------------------------------------
# report


def _csv(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _comparable(cfg_text: str) -> dict:
    import configparser

    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(cfg_text)
    return {
        (s, k): v for s in cp.sections() for k, v in cp[s].items()
        if (s, k) not in _REPORT_FREE_KEYS and s != "ablation"
    }


def cmd_report(histories: Sequence[str | Path], out: str | Path | None = None) -> list[dict]:
    if not histories:
        raise CliError("report needs at least one history file")
    runs = []
    reference = None
    for h in histories:
        h = Path(h)
        with open(h, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != fed.HISTORY_FIELDS:
                raise CliError(f"{h}: columns {reader.fieldnames} do not match {list(fed.HISTORY_FIELDS)}")
            rows = list(reader)
        if not rows:
            raise CliError(f"{h}: no records")
        manifest_path = h.parent / MANIFEST
        if manifest_path.is_file():
            manifest = json.loads(manifest_path.read_text())
            mode, cfg_text = manifest["mode"], manifest["config"]
        else:
            mode, cfg_text = "unknown", ""
        key = _comparable(cfg_text) if cfg_text else {}
        if reference is None:
            reference = (h, key)
        elif key != reference[1]:
            diff = sorted(f"{s}.{k}" for s, k in set(key) ^ set(reference[1])) or sorted(
                f"{s}.{k}" for (s, k), v in key.items() if reference[1].get((s, k)) != v)
            raise CliError(f"{h} and {reference[0]} come from different configs (differ in {', '.join(diff)})")
        last = max(int(r["epoch"]) for r in rows)
        final = {int(r["client"]): float(r["test_acc"]) for r in rows if int(r["epoch"]) == last}
        runs.append((mode, final))

    table = []
    for mode in sorted({m for m, _ in runs}):
        per_client: dict[int, list[float]] = {}
        for m, final in runs:
            if m == mode:
                for c, acc in final.items():
                    per_client.setdefault(c, []).append(acc)
        clients = sorted(per_client)
        for c in clients + ["mean"]:
            vals = per_client[c] if c != "mean" else [
                float(np.mean([f[k] for k in f])) for m, f in runs if m == mode]
            table.append({
                "mode": mode, "client": c, "n_runs": len(vals),
                "mean_test_acc": float(np.mean(vals)), "std_test_acc": float(np.std(vals)),
            })
    text = _csv(REPORT_FIELDS, table)
    if out:
        Path(out).write_text(text)
    print(f"{'mode':<6} {'client':>6} {'runs':>4} {'mean':>8} {'std':>8}")
    for r in table:
        print(f"{r['mode']:<6} {str(r['client']):>6} {r['n_runs']:>4} {r['mean_test_acc']:>8.4f} {r['std_test_acc']:>8.4f}")
    return table


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pflsim", description="Prompt-based personalized FL simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="run config file (INI sections)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=out_help)
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")

    p = sub.add_parser("gen-data", help="write the synthetic client datasets as JSONL")
    common(p)

    p = sub.add_parser("train", help="run federated training")
    common(p)
    p.add_argument("--ablation", choices=ABLATION_MODES + ("pm", "no_prompt", "no_communication",
                                                          "no_image_prompt", "no_text_prompt"))
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("eval", help="test accuracy of a trained run's checkpoints")
    p.add_argument("run_dir")
    p.add_argument("--config", help="config to use instead of RUN_DIR/config.ini")
    p.add_argument("--out", help="CSV path (default RUN_DIR/eval.csv)")

    p = sub.add_parser("export-prompts", help="write every client's prompts as standalone files")
    p.add_argument("run_dir")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="aggregate final accuracies over runs")
    p.add_argument("histories", nargs="+")
    p.add_argument("--out", help="CSV path for the table")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        if args.command == "gen-data":
            cmd_gen_data(resolve_config(args))
        elif args.command == "train":
            if args.threads < 1:
                raise CliError("--threads must be >= 1")
            cmd_train(resolve_config(args), threads=args.threads)
        elif args.command == "eval":
            cmd_eval(args.run_dir, args.config, args.out)
        elif args.command == "export-prompts":
            cmd_export_prompts(args.run_dir, args.out)
        elif args.command == "report":
            cmd_report(args.histories, args.out)
    except fed.RunAborted as exc:
        print(f"pflsim: training aborted: {exc}", file=sys.stderr)
        return 3
    except (CliError, ConfigError, InputError, DatasetError, OSError) as exc:
        print(f"pflsim: error: {exc}", file=sys.stderr)
        return 2
    return 0
