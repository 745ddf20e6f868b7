"""Command-line entry point: synthetic data, training, evaluation, routing maps,
solver benchmarks, and the gradient-check suite."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from roam import bagio, nnmodel, otroute, tokenizer, traingrad

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class ConfigError(Exception):
    """Invalid or unresolvable run configuration (exit code 2)."""


def _from_mapping(cls, mapping: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        obj = cls(**mapping)
        obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{section}' config: {exc}") from exc
    return obj


def load_run_config(path, seed: int | None = None):
    """Resolve {model, train, data} sections; CLI seed overrides the file."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(doc) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    train_section = dict(doc.get("train", {}) or {})
    if seed is not None:
        train_section["seed"] = seed
    roam_cfg = _from_mapping(nnmodel.RoamConfig, dict(doc.get("model", {}) or {}), "model")
    train_cfg = _from_mapping(traingrad.TrainConfig, train_section, "train")
    data = dict(doc.get("data", {}) or {})
    bad = set(data) - {"manifest"}
    if bad:
        raise ConfigError(f"unknown keys in 'data': {sorted(bad)}")
    return roam_cfg, train_cfg, data


def _resolved_config_doc(roam_cfg, train_cfg, data) -> dict:
    return {
        "model": dataclasses.asdict(roam_cfg),
        "train": dataclasses.asdict(train_cfg),
        "data": data,
    }


def _write_yaml(doc: dict, path: Path) -> None:
    path.write_text(yaml.safe_dump(doc, sort_keys=True))


# ---------------------------------------------------------------------------
# gen-synth


def _load_synth_spec(path, seed: int | None) -> bagio.SynthSpec:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"synth spec not found: {p}")
    doc = yaml.safe_load(p.read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError("synth spec must be a mapping")
    if "patches_range" in doc:
        doc["patches_range"] = tuple(doc["patches_range"])
    if "class_rule" in doc and doc["class_rule"] is not None:
        doc["class_rule"] = {int(k): list(v) for k, v in doc["class_rule"].items()}
    if seed is not None:
        doc["seed"] = seed
    spec = _from_mapping(bagio.SynthSpec, doc, "synth")
    return spec


def cmd_gen_synth(args) -> int:
    spec = _load_synth_spec(args.spec, args.seed)
    out = Path(args.out)
    bag_dir = out / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)

    slides = []
    for cls in range(spec.n_classes):
        for s in range(spec.n_slides_per_class):
            slides.append((cls, s))
    total = len(slides)
    n_val = int(0.15 * total)
    n_test = int(0.15 * total)

    # Near-stratified assignment: shuffle within class, interleave classes,
    # carve test then val off the front, remainder is train.
    rng = np.random.default_rng(spec.seed)
    per_class = {c: [s for cc, s in slides if cc == c] for c in range(spec.n_classes)}
    for c in per_class:
        rng.shuffle(per_class[c])
    interleaved = []
    for i in range(spec.n_slides_per_class):
        for c in range(spec.n_classes):
            interleaved.append((c, per_class[c][i]))
    split_of = {}
    for i, key in enumerate(interleaved):
        split_of[key] = "test" if i < n_test else "val" if i < n_test + n_val else "train"

    entries = []
    for cls, s in slides:
        bag = bagio.gen_synthetic_slide(spec, cls, s)
        rel = f"bags/{bag.slide_id}.bag"
        bagio.write_bag(bag, out / rel)
        entries.append(bagio.ManifestEntry(bag.slide_id, rel, cls, split_of[(cls, s)]))
    manifest = bagio.DatasetManifest(entries=entries, root=out)
    bagio.write_manifest(manifest, out / "manifest.csv")
    spec_doc = dataclasses.asdict(spec)
    spec_doc["patches_range"] = list(spec.patches_range)
    _write_yaml(spec_doc, out / "synth_spec.yaml")
    print(f"wrote {total} bags and manifest to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    roam_cfg, train_cfg, data = load_run_config(args.config, args.seed)
    manifest_path = data.get("manifest")
    if manifest_path is None:
        raise ConfigError("config 'data.manifest' is required for training")
    manifest_path = Path(manifest_path)
    if not manifest_path.is_absolute():
        manifest_path = Path(args.config).parent / manifest_path
    if not manifest_path.exists():
        raise ConfigError(f"manifest not found: {manifest_path}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = _resolved_config_doc(roam_cfg, train_cfg, {"manifest": str(manifest_path)})
    _write_yaml(resolved, out / "config.resolved.yaml")
    if args.dry_run:
        print(yaml.safe_dump(resolved, sort_keys=True))
        return EXIT_OK

    manifest = bagio.load_manifest(manifest_path)
    history_path = out / "history.jsonl"
    with open(history_path, "w") as hist_file:

        def progress(record):
            hist_file.write(json.dumps(record) + "\n")
            print(
                f"epoch {record['epoch']:3d}  train {record['train_loss']:.4f}  "
                f"val {record['val_loss']:.4f}  lr {record['lr']:.2e}"
            )

        params, _ = traingrad.train(manifest, roam_cfg, train_cfg, progress=progress)

    nnmodel.save_checkpoint(params, out / "checkpoint.bin")
    report = traingrad.evaluate_bags(
        [manifest.load(e) for e in manifest.split("val")], params, roam_cfg
    )
    (out / "report.json").write_text(json.dumps({"val": report.to_dict()}, indent=2))
    print(f"training done; artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    roam_cfg, _, _ = load_run_config(args.config, None)
    params = nnmodel.load_checkpoint(args.checkpoint)
    params.validate_shapes(roam_cfg)
    manifest = bagio.load_manifest(args.manifest)
    entries = manifest.split(args.split)
    if not entries:
        raise ConfigError(f"split {args.split!r} is empty")
    report = traingrad.evaluate_bags([manifest.load(e) for e in entries], params, roam_cfg)
    doc = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(doc)
    print(doc)
    return EXIT_OK


# ---------------------------------------------------------------------------
# route


def cmd_route(args) -> int:
    roam_cfg, _, _ = load_run_config(args.config, None)
    params = nnmodel.load_checkpoint(args.checkpoint)
    params.validate_shapes(roam_cfg)
    bag = bagio.read_bag(args.bag)
    logits, diag = nnmodel.roam_forward(bag, params, roam_cfg, training=False)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    map_path = out / f"{bag.slide_id}.routing.csv"
    with open(map_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["region_id", "x", "y", "mass", "dominant_expert"]
            + [f"gamma_{e}" for e in range(roam_cfg.n_experts)]
        )
        for m, (rid, x, y, mass) in enumerate(tokenizer.regions_to_csv_rows(diag.regions)):
            w.writerow([rid, x, y, mass, int(diag.dominant_expert[m])] + list(diag.dispatch[m]))
    diag_doc = {
        "slide_id": bag.slide_id,
        "logits": [float(v) for v in logits],
        "expert_load": [float(v) for v in diag.expert_load],
        "gates": [float(v) for v in diag.gates],
        "routing_mode": diag.routing_mode,
        "row_residuals": diag.row_residuals,
        "neighbor_disagreement": traingrad.neighbor_disagreement(diag.dispatch, diag.graph),
    }
    (out / f"{bag.slide_id}.diagnostics.json").write_text(json.dumps(diag_doc, indent=2))
    print(f"wrote routing map to {map_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    torch.set_num_threads(1)
    sizes = []
    for token in args.sizes.split(";"):
        m, e, t = (int(v) for v in token.split(","))
        sizes.append((m, e, t))
    rng = np.random.default_rng(args.seed or 0)
    writer = csv.writer(sys.stdout)
    writer.writerow(["solver", "m", "e", "t", "seconds"])
    for m, e, t in sizes:
        cost = torch.from_numpy(rng.uniform(0, 2, size=(m, e)))
        marg = otroute.Marginals.from_masses(np.ones(m), e)
        centroids = rng.uniform(size=(m, 2))
        graph = tokenizer.heat_kernel_weights(
            tokenizer.build_region_graph(centroids, 8), centroids
        )
        for name, solve in (
            ("sinkhorn", lambda: otroute.sinkhorn(cost, marg, 0.1, t)),
            ("graph_sinkhorn", lambda: otroute.graph_sinkhorn(cost, marg, 0.1, t, graph, 0.3, 3)),
        ):
            solve()  # warm up
            reps = max(1, args.reps)
            start = time.perf_counter()
            for _ in range(reps):
                solve()
            writer.writerow([name, m, e, t, (time.perf_counter() - start) / reps])
    return EXIT_OK


# ---------------------------------------------------------------------------
# check-grad


def cmd_check_grad(args) -> int:
    torch.set_num_threads(1)
    bag, base = traingrad.make_tiny_instance(args.seed or 0)
    variants = {
        "default": {},
        "no_routing_gnn": {"no_routing_gnn": True},
        "no_graph_reg": {"no_graph_reg": True},
        "softmax_routing": {"softmax_routing": True},
        "no_ot_modulation": {"no_ot_modulation": True},
        "detach_routing": {"detach_routing": True},
    }
    if args.variant != "all":
        variants = {args.variant: variants[args.variant]}
    failed = False
    for name, flags in variants.items():
        config = dataclasses.replace(base, **flags)
        errors = traingrad.finite_difference_check(config, bag=bag, seed=args.seed or 0)
        worst = max(errors.values())
        status = "ok" if worst <= 1e-4 else "FAIL"
        print(f"{name:18s} max_rel_err={worst:.3e}  {status}")
        failed = failed or worst > 1e-4
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (YAML)")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--out", help="output directory")
    common.add_argument("--dry-run", action="store_true", help="validate and print, do no work")

    parser = argparse.ArgumentParser(prog="roam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="synth spec file (YAML)")
    p.set_defaults(func=cmd_gen_synth, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.set_defaults(func=cmd_train, needs_out=True, needs_config=True)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=list(bagio.VALID_SPLITS))
    p.set_defaults(func=cmd_eval, needs_config=True)

    p = sub.add_parser("route", parents=[common], help="export a routing map for one bag")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bag", required=True)
    p.set_defaults(func=cmd_route, needs_out=True, needs_config=True)

    p = sub.add_parser("bench", parents=[common], help="time the transport solvers")
    p.add_argument("--sizes", default="64,8,20;128,8,20;256,8,20;256,8,40")
    p.add_argument("--reps", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("check-grad", parents=[common], help="finite-difference gradient suite")
    p.add_argument(
        "--variant",
        default="all",
        choices=["all", "default", "no_routing_gnn", "no_graph_reg", "softmax_routing",
                 "no_ot_modulation", "detach_routing"],
    )
    p.set_defaults(func=cmd_check_grad)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "needs_out", False) and not args.out:
        parser.error(f"{args.command} requires --out")
    if getattr(args, "needs_config", False) and not args.config:
        parser.error(f"{args.command} requires --config")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
