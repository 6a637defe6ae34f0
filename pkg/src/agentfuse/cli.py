"""Command line entry point: ``agentfuse <subcommand> ...``.

Every subcommand writes ``resolved.json`` (or ``<out>.resolved.json`` for
file outputs) holding the fully layered configuration it ran with.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import perturbations as pt
from .attention import AgentFusionModel
from .config import config_hash, scene_config, train_config, write_resolved
from .data import Dataset, FrameStub, dataset_from_files, export_scene_files, generate_dataset
from .harness import (
    TrainingDiverged, ablation_table, predict_dataset, robustness_eval, run_ablation, train,
    write_table_csv,
)
from .metrics import evaluate_records, write_predictions, write_report
from .streams import CategoryEmbedder

log = logging.getLogger("agentfuse")


def _split(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _param_overrides(items: list[str]) -> dict:
    """``key=value`` with JSON values (``0.2``, ``[0, 0.3]``, ``true``); lists become tuples."""
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        value = json.loads(raw)
        out[key.strip()] = tuple(value) if isinstance(value, list) else value
    return out


def _dump(path: Path, body: dict) -> None:
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=str))


def _out_dir(path: str) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_data(path: str, args) -> Dataset:
    """``.npz`` written by ``gen``, or a directory of JSONL stream files."""
    p = Path(path)
    if p.is_dir():
        scene = scene_config(args.scene_config, args.scene_set)
        ds, rejected = dataset_from_files(p / "embeddings.jsonl", p / "detections.jsonl", p / "labels.jsonl",
                                          CategoryEmbedder(scene.category_dim), scene.max_entities)
        for err in rejected:
            log.warning("skipped %s", err)
        return ds
    return Dataset.load(p)


# -- subcommands ---------------------------------------------------------------------------
def cmd_gen(args) -> int:
    scene = scene_config(args.scene_config, args.scene_set)
    out = _out_dir(args.out)
    if args.files:
        export_scene_files(scene, args.n, out, args.first)
    else:
        generate_dataset(scene, args.n, args.first, args.prefix).save(out / "dataset.npz")
    write_resolved(out / "resolved.json", scene=scene)
    _dump(out / "gen.json", {"n": args.n, "first": args.first, "files": args.files})
    return 0


def cmd_train(args) -> int:
    cfg = train_config(args.profile, args.config, args.set)
    ds = _load_data(args.data, args)
    out = _out_dir(args.out)
    write_resolved(out / "resolved.json", train=cfg)
    try:
        _, record = train(cfg, ds, out, progress=lambda e, loss, _m: log.info("epoch %d: %.6f", e, loss))
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good parameters: {exc.checkpoint}", file=sys.stderr)
        return 3
    print(json.dumps({"config_hash": record.config_hash, "final_loss": record.epoch_losses[-1]}))
    return 0


def cmd_eval(args) -> int:
    model = AgentFusionModel.load(args.checkpoint)
    ds = _load_data(args.data, args)
    out = _out_dir(args.out)
    records = predict_dataset(model, ds)
    report = evaluate_records(records)
    digest = config_hash(model.manifest(), ds.meta)
    write_predictions(out / "predictions.jsonl", records)
    write_report(out / "report.json", report, digest, {"checkpoint": str(args.checkpoint), "data": str(args.data)})
    _dump(out / "resolved.json", {"model": model.manifest(), "data": ds.meta, "config_hash": digest})
    print(json.dumps({"mAP": report.mAP, "AUROC": report.AUROC, "mIOU": report.mIOU}))
    return 0


def cmd_ablate(args) -> int:
    base = train_config(args.profile, args.config, args.set)
    scene = scene_config(args.scene_config, args.scene_set)
    seeds = [int(s) for s in _split(args.seeds)]
    rows = run_ablation(args.axis, _split(args.values), base, scene, args.n_train, args.n_test, seeds)
    out = _out_dir(args.out)
    table = ablation_table(rows)
    write_table_csv(out / "table.csv", table)
    _dump(out / "ablation.json", {"axis": args.axis, "rows": [
        {"value": r.value, "seed": r.seed, "record": r.record.to_dict()} for r in rows]})
    write_resolved(out / "resolved.json", train=base, scene=scene)
    for row in table:
        print(f"{row['value']:>14} seed {row['seed']}: mAP {row['mAP']}")
    return 0


def cmd_perturb(args) -> int:
    cfg = pt.make_config(args.kind, seed=args.seed, **_param_overrides(args.set))
    frames, layout = pt.read_frames(args.inp)
    pt.write_frames(args.out, pt.perturb_frames(frames, args.kind, cfg), layout)
    out = Path(args.out)
    _dump(out.with_name(out.name + ".resolved.json"), {"kind": args.kind, "config": asdict(cfg), "input": args.inp})
    return 0


def cmd_robust_eval(args) -> int:
    model = AgentFusionModel.load(args.checkpoint)
    ds = _load_data(args.data, args)
    stub = FrameStub(args.stub_lo, args.stub_hi, args.stub_block)
    rep = robustness_eval(model, ds, args.kind, args.seed, stub, **_param_overrides(args.set))
    out = _out_dir(args.out)
    _dump(out / "robustness.json", rep.to_dict())
    _dump(out / "resolved.json", {"model": model.manifest(), "data": ds.meta, "kind": args.kind,
                                  "perturbation": rep.config, "stub": asdict(stub)})
    print(json.dumps(rep.deltas))
    return 0


SUMMARY_FIELDS = ("source", "kind", "mAP", "AUROC", "mIOU", "config_hash")


def _collect(path: Path) -> list[dict]:
    rows = []
    for f in sorted(path.rglob("*.json")):
        if f.name.endswith("resolved.json"):
            continue
        body = json.loads(f.read_text())
        if "metrics" in body:
            m = body["metrics"]
            rows.append({"source": str(f), "kind": "eval", "mAP": m["mAP"], "AUROC": m["AUROC"],
                         "mIOU": m["mIOU"], "config_hash": body.get("config_hash")})
        elif "clean" in body and "corrupted" in body:
            for variant in ("clean", "corrupted"):
                m = body[variant]
                rows.append({"source": str(f), "kind": f"{body['kind']}:{variant}", "mAP": m["mAP"],
                             "AUROC": m["AUROC"], "mIOU": m["mIOU"], "config_hash": None})
        elif "axis" in body and "rows" in body:
            for r in body["rows"]:
                m = r["record"]["report"]
                rows.append({"source": str(f), "kind": f"{body['axis']}={r['value']}/seed{r['seed']}",
                             "mAP": m["mAP"], "AUROC": m["AUROC"], "mIOU": m["mIOU"],
                             "config_hash": r["record"]["config_hash"]})
        elif "epoch_losses" in body and body.get("report"):
            m = body["report"]
            rows.append({"source": str(f), "kind": "run", "mAP": m["mAP"], "AUROC": m["AUROC"],
                         "mIOU": m["mIOU"], "config_hash": body["config_hash"]})
    return rows


def cmd_report(args) -> int:
    rows = [row for p in args.runs for row in _collect(Path(p))]
    out = _out_dir(args.out)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        w.writerows(rows)
    _dump(out / "summary.json", {"rows": rows})
    _dump(out / "resolved.json", {"runs": args.runs})
    print(f"{len(rows)} rows -> {out / 'summary.csv'}")
    return 0


# -- parser -----------------------------------------------------------------------------
def _train_opts(p):
    p.add_argument("--profile", default="desk", help="named base profile (desk or paper)")
    p.add_argument("--config", action="append", default=[], help="JSON file of training fields; repeatable")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="training field override")


def _scene_opts(p):
    p.add_argument("--scene-config", action="append", default=[], help="JSON file of scene fields")
    p.add_argument("--scene-set", action="append", default=[], metavar="KEY=VALUE", help="scene field override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--first", type=int, default=0, help="index of the first scene")
    p.add_argument("--prefix", default="scene")
    p.add_argument("--files", action="store_true", help="write JSONL stream files instead of dataset.npz")
    _scene_opts(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset.npz or a directory of stream files")
    p.add_argument("--out", required=True)
    _train_opts(p)
    _scene_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _scene_opts(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one axis and tabulate")
    p.add_argument("--axis", required=True, choices=["fusion-mode", "module-switch", "agents", "heads", "frames"])
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", default="0")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--out", required=True)
    _train_opts(p)
    _scene_opts(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("perturb", help="corrupt a video file or PNG frame directory")
    p.add_argument("--kind", required=True, choices=sorted(pt.PERTURBATIONS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="perturbation parameter")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("robust-eval", help="clean vs corrupted evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="perturbation parameter")
    p.add_argument("--stub-lo", type=float, default=-4.0)
    p.add_argument("--stub-hi", type=float, default=4.0)
    p.add_argument("--stub-block", type=int, default=2)
    _scene_opts(p)
    p.set_defaults(func=cmd_robust_eval)

    p = sub.add_parser("report", help="collect run outputs into summary.csv / summary.json")
    p.add_argument("runs", nargs="+", help="directories to scan for run outputs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
