"""``msf`` command suite.

Exit codes: 0 success, 2 config/argument error, 3 data/shape error, 4 I/O error.
"""
import argparse
import csv
import io as _io
import json
import os
import re
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import ablation
from ._rng import derive_seed
from .errors import ArgumentError, BoundsError, FormatError, ShapeError
from .fusion import (MsfConfig, ProjectionPair, compute_cost_ratio, count_codebook_params,
                     msf_forward, split_levels)
from .io import read_tensor, write_json, write_tensor
from .metrics import LabelMap, evaluate, kmeans_cluster
from .pyramid import Pyramid
from .quantizer import Codebook, fit_codebook_ema
from .synth import ComfortModel, PrototypeBank, SceneSpec, gen_feature_pyramid, gen_scene

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_IO = 0, 2, 3, 4
FEATURE_RE = re.compile(r"features_s(\d+)\.msf$")


def load_schema(name):
    text = resources.files("msfusion").joinpath("schemas", f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


def load_json_doc(path, schema):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: invalid JSON ({exc})") from exc
    try:
        jsonschema.validate(doc, load_schema(schema))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ArgumentError(f"{path}: schema violation at {where}: {exc.message}") from exc
    return doc


def _dump(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p


def read_feature_dir(path):
    """Feature maps ``features_s<n>.msf`` of a directory as a pyramid."""
    path = Path(path)
    if not path.is_dir():
        raise OSError(2, f"feature directory {path} does not exist")
    found = {}
    for f in sorted(path.iterdir()):
        m = FEATURE_RE.match(f.name)
        if m:
            found[int(m.group(1))] = read_tensor(f)[0].astype(np.float64)
    if not found:
        raise ArgumentError(f"no features_s<n>.msf files in {path}")
    scales = sorted(found)
    if scales != list(range(1, len(scales) + 1)):
        raise ShapeError(f"feature scales {scales} are not contiguous from 1")
    return Pyramid(tuple(found[n] for n in scales))


def load_projection(path, c, proj_seed):
    if path:
        w, _ = read_tensor(path)
        return ProjectionPair.from_down(w.astype(np.float64))
    return ProjectionPair.random(c, proj_seed)


# -- commands ---------------------------------------------------------------

def cmd_synth(args):
    doc = load_json_doc(args.scene, "scene")
    n_scales = args.n_scales or doc.get("n_scales", 3)
    c = args.channels or doc.get("channels", 16)
    spec = SceneSpec.from_dict(doc)
    try:
        spec.check_divisible(n_scales)
    except ShapeError as exc:
        raise ArgumentError(str(exc)) from exc
    model = ComfortModel(**doc.get("comfort", {}))
    n_types = doc.get("n_types", max(spec.type_ids) + 1)
    if max(spec.type_ids) >= n_types:
        raise ArgumentError(f"n_types={n_types} does not cover type id {max(spec.type_ids)}")
    bank = PrototypeBank.random(n_types, c, 4 * model.noise_scale, derive_seed(args.seed, "bank"))
    image, _ = gen_scene(spec, derive_seed(args.seed, "image"))
    pyr, labels = gen_feature_pyramid(spec, bank, model, n_scales, derive_seed(args.seed, "features"))

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    common = {"seed": args.seed, "n_scales": n_scales}
    files = {"image": "image.msf", "features": [], "masks": []}
    write_tensor(out / "image.msf", image, {**common, "role": "image"})
    for n, (lvl, lab) in enumerate(zip(pyr.levels, labels), start=1):
        fname, mname = f"features_s{n}.msf", f"gt_s{n}.msf"
        write_tensor(out / fname, lvl, {**common, "role": "features", "scale": n})
        write_tensor(out / mname, lab.astype(np.uint32),
                     {**common, "role": "mask", "scale": n, "background_id": 0})
        files["features"].append(fname)
        files["masks"].append(mname)
    manifest = {**common, "channels": c, "scene": spec.to_dict(), "files": files}
    write_json(out / "manifest.json", manifest)
    print(_dump(manifest))
    return EXIT_OK


def cmd_project(args):
    proj = ProjectionPair.random(args.c, args.seed)
    write_tensor(args.out, proj.w_down, {"role": "projection", "seed": args.seed, "c": args.c})
    print(_dump({"out": str(args.out), "c": args.c, "seed": args.seed}))
    return EXIT_OK


def cmd_fit(args):
    pyr = read_feature_dir(args.features)
    proj = load_projection(args.projection, pyr.channels, args.proj_seed)
    si, sv = split_levels(pyr, proj)
    if args.role == "si":
        rows = [np.concatenate([lvl.reshape(-1, lvl.shape[-1]) for lvl in si])]
        cb_id = "shared-si"
        scale = None
    else:
        if args.scale is None:
            rows = [np.concatenate([lvl.reshape(-1, lvl.shape[-1]) for lvl in sv])]
            cb_id = "sv-shared"
        else:
            if not 1 <= args.scale <= pyr.n_scales:
                raise ArgumentError(f"--scale {args.scale} outside [1, {pyr.n_scales}]")
            rows = [sv[args.scale - 1]]
            cb_id = f"sv-scale-{args.scale}"
        scale = args.scale
    cb, state = fit_codebook_ema(rows, args.m, args.decay, args.epochs,
                                 derive_seed(args.seed, "fit", cb_id), replace_dead=not args.no_replace,
                                 age_threshold=args.age_threshold, codebook_id=cb_id)
    meta = {"role": "codebook", "id": cb_id, "scale": scale, "seed": args.seed, "m": args.m,
            "proj_seed": None if args.projection else args.proj_seed}
    write_tensor(args.out, cb.codes, meta)
    summary = {"out": str(args.out), "id": cb_id, "m": args.m, "channels": cb.channels,
               "n_samples": int(sum(len(r.reshape(-1, cb.channels)) for r in rows)),
               "used_codes": int((state.usage_age == 0).sum())}
    print(_dump(summary))
    return EXIT_OK


def _load_codebook(path):
    codes, meta = read_tensor(path)
    return Codebook(codes.astype(np.float64), meta.get("id", Path(path).stem))


def cmd_fuse(args):
    doc = load_json_doc(args.config, "run_config")
    base = Path(args.config).resolve().parent
    pyr = read_feature_dir(_resolve(base, doc["features_dir"]))
    cb_si = _load_codebook(_resolve(base, doc["codebook_si"]))
    cb_sv = [_load_codebook(_resolve(base, p)) for p in doc["codebooks_sv"]]
    cfg = MsfConfig(
        n_scales=doc.get("n_scales", pyr.n_scales),
        c=pyr.channels,
        m_group=cb_si.size,
        inter_fusion=doc.get("inter_fusion", True),
        intra_fusion=doc.get("intra_fusion", True),
        sv_codebooks=doc.get("sv_codebooks", "per_scale"),
        guidance_scales=tuple(doc.get("guidance_scales", [1])),
        adjacent_only=doc.get("adjacent_only", False),
    )
    proj_path = _resolve(base, doc["projection"]) if "projection" in doc else None
    proj = load_projection(proj_path, pyr.channels, doc.get("proj_seed", 0))

    start = time.perf_counter()
    out = msf_forward(pyr, proj, cb_si, cb_sv, cfg, threads=args.threads)
    elapsed = (time.perf_counter() - start) * 1000.0

    out_dir = _resolve(base, doc["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for n, g in zip(cfg.guidance_scales, out.guidance):
        name = f"guidance_s{n}.msf"
        write_tensor(out_dir / name, g, {"role": "guidance", "scale": n})
        written.append(name)
    for n, diag in enumerate(out.diagnostics, start=1):
        write_tensor(out_dir / f"indices_si_s{n}.msf", diag.indices_si.astype(np.uint32),
                     {"role": "indices", "scale": n})
        write_tensor(out_dir / f"winning_scale_s{n}.msf", diag.winning_scale.astype(np.uint32),
                     {"role": "winning_scale", "scale": n})
    for n, res in enumerate(out.sv_results, start=1):
        write_tensor(out_dir / f"indices_sv_s{n}.msf", res.indices.astype(np.uint32),
                     {"role": "indices_sv", "scale": n})
    report = {
        "config_echo": doc,
        "guidance_files": written,
        "n_scales": cfg.n_scales,
        "guidance_scales": list(cfg.guidance_scales),
        "winning_scale_histogram": [
            np.bincount(d.winning_scale.ravel(), minlength=cfg.n_scales + 1)[1:].tolist()
            for d in out.diagnostics
        ],
    }
    write_json(out_dir / "report.json", report)
    # wall-clock numbers live apart from the deterministic outputs
    write_json(out_dir / "timings.json", {"msf_forward_ms": elapsed, "threads": args.threads})
    print(_dump({"output_dir": str(out_dir), "guidance_files": written}))
    return EXIT_OK


def cmd_cluster(args):
    feats, _ = read_tensor(args.features)
    k = args.k
    if k is None:
        if not args.gt:
            raise ArgumentError("give --k or --gt to take k from the ground truth")
        k = len(np.unique(read_tensor(args.gt)[0]))
    labels = kmeans_cluster(feats.astype(np.float64), k, args.seed).labels
    write_tensor(args.out, labels.astype(np.uint32), {"role": "clusters", "k": int(k), "seed": args.seed})
    print(_dump({"out": str(args.out), "k": int(k)}))
    return EXIT_OK


def cmd_eval(args):
    pred, _ = read_tensor(args.pred)
    gt, gt_meta = read_tensor(args.gt)
    bg = args.background_id if args.background_id is not None else gt_meta.get("background_id", 0)
    feats = None
    if args.features:
        feats = read_tensor(args.features)[0].astype(np.float64)
    report = evaluate(LabelMap(pred.astype(np.int64)).labels, LabelMap(gt.astype(np.int64), bg).labels,
                      feats, background_id=bg)
    report["config_echo"] = {"pred": str(args.pred), "gt": str(args.gt),
                             "features": str(args.features) if args.features else None,
                             "background_id": bg}
    if args.out:
        write_json(args.out, report)
    print(_dump(report))
    return EXIT_OK


def params_report(m, c, m_group, n):
    cfg = MsfConfig(n_scales=n, c=c, m_group=m_group)
    counts = count_codebook_params(cfg, m)
    return {"baseline": counts.baseline, "msf": counts.msf, "reduction_pct": counts.reduction_pct,
            "cost_ratio": compute_cost_ratio(n)}


def cmd_params(args):
    print(_dump(params_report(args.m, args.c, args.m_group, args.n)))
    return EXIT_OK


def _csv_value(v):
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, list):
        return "+".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def ablation_csv(rows, record_timings=False):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ablation.CSV_COLUMNS)
    for r in rows:
        vals = []
        for col in ablation.CSV_COLUMNS:
            v = r[col]
            if col == "wall_ms" and not record_timings:
                v = ""
            vals.append(_csv_value(v))
        writer.writerow(vals)
    return buf.getvalue()


def cmd_ablate(args):
    doc = load_json_doc(args.config, "ablate")
    base = Path(args.config).resolve().parent
    bench = ablation.Benchmark.from_dict(doc.get("benchmark", {}))
    seed = args.seed if args.seed is not None else doc.get("master_seed", 0)
    rows = ablation.run_grid(doc["grid"], seed, bench, doc.get("base"), threads=args.threads)
    out_dir = Path(args.out_dir) if args.out_dir else _resolve(base, doc.get("output_dir", "ablation_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.csv").write_text(ablation_csv(rows, args.record_timings), encoding="utf-8")
    metrics = ("ari", "ari_fg", "miou", "mbo", "inter_cluster", "intra_cluster")
    best = max(rows, key=lambda r: r["ari"] + r["ari_fg"])
    summary = {
        "master_seed": seed,
        "n_rows": len(rows),
        "grid": doc["grid"],
        "benchmark": bench.to_dict(),
        "best_run_id": best["run_id"],
        "mean": {k: float(np.mean([r[k] for r in rows])) for k in metrics},
    }
    write_json(out_dir / "summary.json", summary)
    print(_dump({"output_dir": str(out_dir), "n_rows": len(rows), "best_run_id": best["run_id"]}))
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _default_threads():
    try:
        return max(1, int(os.environ.get("MSF_THREADS", "1")))
    except ValueError:
        return 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help="worker threads (default: $MSF_THREADS or 1); results do not depend on it")

    parser = argparse.ArgumentParser(prog="msf", description="Multi-scale quantized fusion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene and feature pyramid")
    p.add_argument("scene", help="scene JSON document")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-scales", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project", parents=[common], help="write a seeded random projection matrix")
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("fit", parents=[common], help="fit a codebook by EMA k-means")
    p.add_argument("--features", required=True, help="directory holding features_s<n>.msf")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--role", choices=("si", "sv"), required=True)
    p.add_argument("--scale", type=int, default=None, help="scale for --role sv (omit for a shared sv codebook)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--projection", default=None, help="projection tensor file (default: seeded random)")
    p.add_argument("--proj-seed", type=int, default=0)
    p.add_argument("--decay", type=float, default=0.99)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--age-threshold", type=int, default=2)
    p.add_argument("--no-replace", action="store_true", help="disable dead-code replacement")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fuse", parents=[common], help="run the fusion pipeline from a run config")
    p.add_argument("config")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("cluster", parents=[common], help="k-means labels of a feature tensor")
    p.add_argument("--features", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("eval", parents=[common], help="segmentation metrics and separability")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--background-id", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", parents=[common], help="codebook parameter and compute accounting")
    p.add_argument("--m", type=int, default=4096)
    p.add_argument("--c", type=int, default=256)
    p.add_argument("--m-group", type=int, default=64)
    p.add_argument("--n", type=int, default=3)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid on the synthetic benchmark")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None, help="override master_seed")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--record-timings", action="store_true",
                   help="fill the wall_ms column (makes the CSV run-dependent)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except ArgumentError as exc:
        print(f"msf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShapeError, BoundsError, FormatError) as exc:
        print(f"msf {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"msf {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
