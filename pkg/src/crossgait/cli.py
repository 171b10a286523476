"""Command-line entry point: ``crossgait <command> ...``.

Exit codes: 0 ok, 1 grad check failed, 2 config error, 3 I/O error,
4 non-finite loss, 5 checkpoint shape/version mismatch, 6 protocol error or
malformed embedding file.
"""
from __future__ import annotations

import os

# BLAS picks its thread count when numpy is first imported, so this runs first.
_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def _thread_cap() -> int:
    try:
        return max(0, int(os.environ.get("CROSSGAIT_THREADS", "0")))
    except ValueError:
        return 0


for _var in _THREAD_VARS:
    os.environ[_var] = str(max(1, _thread_cap()))

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import shutil  # noqa: E402
import statistics  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402
from dataclasses import asdict, dataclass, replace  # noqa: E402
from multiprocessing import get_context  # noqa: E402
from pathlib import Path  # noqa: E402

from . import gradsuite  # noqa: E402
from .checkpoint import CheckpointError  # noqa: E402
from .config import ConfigError, dump_section, load_file  # noqa: E402
from .evaluator import (  # noqa: E402
    ALL_PROTOCOLS,
    EmbeddingFileError,
    EmbeddingSet,
    Protocol,
    ProtocolError,
    evaluate_protocol,
    extract_embeddings,
    read_embeddings,
    write_embeddings,
    write_report,
)
from .numerics import DimensionError  # noqa: E402
from .store import STREAM_OF, load_records, manifest_fingerprint  # noqa: E402
from .synthgen import DatasetSpec, generate_dataset, read_manifest  # noqa: E402
from .trainer import (  # noqa: E402
    ModelSettings,
    TrainConfig,
    TrainingAborted,
    TrainingSet,
    TrainState,
    config_text,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_MISMATCH, EXIT_PROTOCOL = range(7)
MANIFEST_NAME = "experiment.json"
SECTIONS = {"data": DatasetSpec, "train": TrainConfig, "model": ModelSettings}


class UsageError(Exception):
    """Bad flag combination; reported as a config error."""


@dataclass
class GradCheckSettings:
    seed: int = 0


# -- shared helpers -------------------------------------------------------------

def load_config(path: str | None) -> dict:
    if path is None:
        return {name: cls() for name, cls in SECTIONS.items()} | {"gradcheck": GradCheckSettings()}
    return load_file(path, {**SECTIONS, "gradcheck": GradCheckSettings})


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def record_experiment(out_dir: Path, command: str, argv: list[str], config: str = "",
                      fingerprint: str | None = None, seeds=(), outputs=()) -> None:
    """Append one command to ``experiment.json`` in ``out_dir`` (rewritten atomically)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_NAME
    doc = json.loads(path.read_text()) if path.exists() else {"history": []}
    if config:
        doc["config"] = config
    if fingerprint:
        doc["dataset_fingerprint"] = fingerprint
    doc["seeds"] = sorted(set(doc.get("seeds", [])) | {int(s) for s in seeds})
    doc["outputs"] = sorted(set(doc.get("outputs", [])) | {str(p) for p in outputs})
    doc["history"].append({"command": command, "argv": list(argv),
                           "time": time.strftime("%Y-%m-%dT%H:%M:%S")})
    _write_atomic(path, json.dumps(doc, indent=2) + "\n")


def _guard_output(path: Path, force: bool) -> None:
    if path.exists():
        if not force:
            raise FileExistsError(f"{path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()


def _modality_filter(text: str) -> tuple[str, ...] | None:
    if text == "all":
        return None
    streams = {"lidar": ("pointcloud", "depth"), "camera": ("silhouette",)}
    if text in streams:
        return streams[text]
    if text in STREAM_OF:
        return (text,)
    raise UsageError(f"unknown modality {text!r}; expected all, lidar, camera or a modality name")


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- gen-data -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec: DatasetSpec = load_config(args.config)["data"]
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    _guard_output(out, args.force)
    generate_dataset(spec, out)
    rows = read_manifest(out)
    record_experiment(out, "gen-data", sys.argv[1:], dump_section("data", spec),
                      manifest_fingerprint(out), [spec.seed], [out / "manifest.csv"])
    train_ids = {r.id for r in rows if spec.split_of(r.id) == "train"}
    test_ids = {r.id for r in rows if spec.split_of(r.id) == "test"}
    _say(f"wrote {len(rows)} sequences to {out}: train split {len(train_ids)} ids, "
         f"test split {len(test_ids)} ids")
    _say(f"manifest sha256 {manifest_fingerprint(out)}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------

def _settings_for(args, settings: ModelSettings) -> ModelSettings:
    if not args.variant:
        return settings
    kw = asdict(settings)
    kw.pop("num_prototypes"), kw.pop("use_cmfa")
    return ModelSettings.variant(args.variant, **kw)


def cmd_train(args) -> int:
    out = Path(args.out)
    if args.resume:
        state, cfg, settings = load_checkpoint(args.resume)
        if args.iters is not None:
            raise UsageError("--iters cannot change the schedule of a resumed run")
    else:
        conf = load_config(args.config)
        cfg, settings = conf["train"], _settings_for(args, conf["model"])
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.iters is not None:
            cfg = TrainConfig(**{**asdict(cfg), "total_iters": args.iters,
                                 "lr_milestones": tuple(m for m in cfg.lr_milestones if m < args.iters)})
        if (out / "final.cgc").exists() or (out / "loss_log.csv").exists():
            _guard_output(out, args.force)
        state = None
    records = load_records(args.data, "train", cache_dir=args.cache)
    data = TrainingSet(records)
    if state is None:
        state = TrainState.fresh(cfg, settings, data.identities)
    record_experiment(out, "train", sys.argv[1:], config_text(cfg, settings), manifest_fingerprint(args.data),
                      [cfg.seed], [out / "final.cgc", out / "loss_log.csv"])
    t0 = time.perf_counter()
    try:
        train(data, cfg, settings, state=state, out_dir=out, progress_every=args.progress_every)
    except TrainingAborted as exc:
        # the failing step never reached the optimizer, so these weights are the last good ones
        keep = out / f"ckpt_{state.iteration:06d}.cgc"
        save_checkpoint(keep, state, cfg, settings)
        print(f"error: {exc} (iteration {exc.iteration}); last good checkpoint {keep}", file=sys.stderr)
        return EXIT_NONFINITE
    _say(f"trained {state.iteration} iterations in {time.perf_counter() - t0:.1f} s; "
         f"final checkpoint {out / 'final.cgc'}")
    return EXIT_OK


# -- embed ----------------------------------------------------------------------

def cmd_embed(args) -> int:
    state, _, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    _guard_output(out, args.force)
    records = load_records(args.data, None if args.split == "all" else args.split,
                           _modality_filter(args.modality), cache_dir=args.cache)
    if not records:
        raise ProtocolError(f"no sequences in split {args.split!r} with modality {args.modality!r}")
    emb = extract_embeddings(records, state.params, state.model_cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(out, emb)
    record_experiment(out.parent, "embed", sys.argv[1:], fingerprint=manifest_fingerprint(args.data),
                      outputs=[out])
    counts = {m: emb.modalities.count(m) for m in sorted(set(emb.modalities))}
    _say(f"wrote {len(emb)} embeddings ({emb.num_parts} parts x {emb.vectors.shape[1] // emb.num_parts}) "
         f"to {out}: {counts}")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------

def protocol_jobs(probe: EmbeddingSet, gallery: EmbeddingSet | None, which: str):
    """(protocol, probe set, gallery set) triples for ``which`` ('all' or one protocol name)."""
    pairs = [(probe, probe)] if gallery is None else [(probe, gallery), (gallery, probe)]
    protos = ALL_PROTOCOLS if which == "all" else (Protocol.parse(which, cross_view=True),)
    jobs, seen = [], set()
    for proto in protos:
        for p, g in pairs:
            if proto.name in seen:
                continue
            if proto.probe in set(p.streams) and proto.gallery in set(g.streams):
                jobs.append((proto, p, g))
                seen.add(proto.name)
    if not jobs:
        raise ProtocolError(f"protocol {which!r}: the given files hold no matching probe/gallery streams")
    return jobs


def report_filename(name: str, fmt: str) -> str:
    return name.replace("->", "_to_") + "." + fmt


def cmd_eval(args) -> int:
    probe = read_embeddings(args.probe)
    gallery = None
    if args.gallery and Path(args.gallery).resolve() != Path(args.probe).resolve():
        gallery = read_embeddings(args.gallery)
    jobs = protocol_jobs(probe, gallery, args.protocol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / report_filename(p.name, args.format) for p, _, _ in jobs]
    for path in paths:
        if path.exists() and not args.force:
            raise FileExistsError(f"{path} exists; pass --force to overwrite")
    record_experiment(out, "eval", sys.argv[1:], outputs=paths)
    for (proto, p, g), path in zip(jobs, paths):
        rep = evaluate_protocol(p, proto, g)
        write_report(rep, path, args.format)
        _say(f"{proto.name}: rank-1 {rep.rank1:.2f}  rank-5 {rep.rank5:.2f}  -> {path}")
    return EXIT_OK


# -- ablate ---------------------------------------------------------------------

SWEEP_LABELS = {"k": "K", "cmfa": "cmfa", "lambda": "lambda", "variant": "variant"}
ABLATE_COLUMNS = ("sweep", "value", "seed", "status", "seconds", "lidar_to_camera_rank1",
                  "camera_to_lidar_rank1", "lidar_to_camera_rank5", "camera_to_lidar_rank5", "chance")
METRIC_COLUMNS = ABLATE_COLUMNS[5:9]


def parse_sweep(text: str) -> tuple[str, list[str]]:
    key, sep, values = text.partition("=")
    key = key.strip().lower()
    if not sep or key not in SWEEP_LABELS:
        raise UsageError(f"bad sweep {text!r}; expected K=..., cmfa=on,off, lambda=... or variant=...")
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if ".." in values and len(vals) == 1:
        lo, hi = values.split("..")
        vals = [str(v) for v in range(int(lo), int(hi) + 1)]
    if not vals:
        raise UsageError(f"sweep {text!r} lists no values")
    for v in vals:
        apply_sweep(key, v, TrainConfig(), ModelSettings())  # validate up front
    return key, vals


def apply_sweep(key: str, value: str, cfg: TrainConfig, settings: ModelSettings):
    try:
        if key == "k":
            k = int(value)
            if k < 0:
                raise ValueError
            return cfg, replace(settings, num_prototypes=k)
        if key == "cmfa":
            on = {"on": True, "off": False}[value.lower()]
            return cfg, replace(settings, use_cmfa=on)
        if key == "lambda":
            lam = float(value)
            if lam < 0:
                raise ValueError
            return replace(cfg, lam=lam), settings
        if value not in ("full", "two-stream"):
            raise ValueError
        kw = asdict(settings)
        kw.pop("num_prototypes"), kw.pop("use_cmfa")
        return cfg, ModelSettings.variant(value, **kw)
    except (ValueError, KeyError):
        raise UsageError(f"bad value {value!r} for sweep {key}") from None


def run_variant(data_dir: str, cache: str | None, cfg: TrainConfig, settings: ModelSettings,
                out_dir: str | None) -> dict:
    """Train one variant and score both cross-modality directions on the test split."""
    t0 = time.perf_counter()
    train_set = TrainingSet(load_records(data_dir, "train", cache_dir=cache))
    state = train(train_set, cfg, settings, out_dir=out_dir, progress_every=0)
    test = load_records(data_dir, "test", cache_dir=cache)
    emb = extract_embeddings(test, state.params, state.model_cfg)
    result = {"seconds": time.perf_counter() - t0}
    for proto in ALL_PROTOCOLS[:2]:
        rep = evaluate_protocol(emb, proto)
        if out_dir is not None:
            write_report(rep, Path(out_dir) / report_filename(rep.protocol, "csv"))
        key = f"{proto.probe}_to_{proto.gallery}"
        result[f"{key}_rank1"], result[f"{key}_rank5"] = rep.rank1, rep.rank5
    result["chance"] = 100.0 / len(set(emb.identities[emb.streams == "camera"].tolist()))
    return result


def _run_job(job):
    data_dir, cache, cfg, settings, out_dir = job
    try:
        return {"status": "ok", **run_variant(data_dir, cache, cfg, settings, out_dir)}
    except Exception as exc:  # failed runs are recorded and the sweep moves on
        return {"status": f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")}


def median_rows(rows: list[dict]) -> list[dict]:
    out = []
    for value in dict.fromkeys(r["value"] for r in rows):
        ok = [r for r in rows if r["value"] == value and r["status"] == "ok"]
        med = {"sweep": rows[0]["sweep"], "value": value, "seed": "median",
               "status": f"{len(ok)} ok", "seconds": "", "chance": ok[0]["chance"] if ok else ""}
        for col in METRIC_COLUMNS:
            med[col] = statistics.median(r[col] for r in ok) if ok else ""
        out.append(med)
    return out


def write_sweep_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ABLATE_COLUMNS)
        for r in rows:
            w.writerow([f"{r.get(c, ''):.2f}" if isinstance(r.get(c), float) else r.get(c, "")
                        for c in ABLATE_COLUMNS])


def ablate(data_dir: str, cfg: TrainConfig, settings: ModelSettings, sweep: str, seeds: list[int],
           out: Path, cache: str | None = None, workers: int = 0) -> list[dict]:
    """Train every (value, seed) pair; return per-run rows followed by one median row per value."""
    key, values = parse_sweep(sweep)
    jobs, meta = [], []
    for value in values:
        vcfg, vset = apply_sweep(key, value, cfg, settings)
        for seed in seeds:
            run_dir = out / f"{SWEEP_LABELS[key]}={value}" / f"seed{seed}"
            jobs.append((data_dir, cache, replace(vcfg, seed=seed), vset, str(run_dir)))
            meta.append({"sweep": SWEEP_LABELS[key], "value": value, "seed": seed})
    # warm the preprocessing cache once instead of in every worker
    if cache is not None:
        load_records(data_dir, "train", cache_dir=cache)
        load_records(data_dir, "test", cache_dir=cache)
    if workers > 1:
        saved = os.environ.get("CROSSGAIT_THREADS")
        os.environ["CROSSGAIT_THREADS"] = "0"  # one BLAS thread per worker process
        try:
            with ProcessPoolExecutor(workers, mp_context=get_context("spawn")) as pool:
                results = list(pool.map(_run_job, jobs))
        finally:
            if saved is None:
                os.environ.pop("CROSSGAIT_THREADS")
            else:
                os.environ["CROSSGAIT_THREADS"] = saved
    else:
        results = []
        for m, job in zip(meta, jobs):
            res = _run_job(job)
            print(f"{m['sweep']}={m['value']} seed {m['seed']}: {res['status']}", file=sys.stderr)
            results.append(res)
    rows = [{**m, **r} for m, r in zip(meta, results)]
    return rows + median_rows(rows)


def cmd_ablate(args) -> int:
    conf = load_config(args.config)
    cfg, settings = conf["train"], conf["model"]
    if args.iters is not None:
        cfg = TrainConfig(**{**asdict(cfg), "total_iters": args.iters,
                             "lr_milestones": tuple(m for m in cfg.lr_milestones if m < args.iters)})
    parse_sweep(args.sweep)
    out = Path(args.out)
    summary_path = out / "sweep_summary.csv"
    if summary_path.exists():
        _guard_output(out, args.force)
    seeds = list(range(args.seed0, args.seed0 + args.seeds))
    record_experiment(out, "ablate", sys.argv[1:], config_text(cfg, settings),
                      manifest_fingerprint(args.data), seeds, [summary_path])
    rows = ablate(args.data, cfg, settings, args.sweep, seeds, out, args.cache, _thread_cap())
    write_sweep_csv(summary_path, rows)
    for r in rows:
        if r["seed"] == "median":
            _say(f"{r['sweep']}={r['value']} median: LiDAR->Camera {r['lidar_to_camera_rank1']}  "
                 f"Camera->LiDAR {r['camera_to_lidar_rank1']}  (chance {r['chance']})")
    failed = sum(1 for r in rows if r["seed"] != "median" and r["status"] != "ok")
    _say(f"{len(rows)} rows ({failed} failed runs) -> {summary_path}")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    seed = load_config(args.config)["gradcheck"].seed if args.seed is None else args.seed
    t0 = time.perf_counter()
    only = (lambda name: args.only in name) if args.only else None
    results = gradsuite.run(seed, only)
    if not results:
        raise UsageError(f"no grad-check case matches {args.only!r}")
    for r in results:
        _say(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28s} max rel error {r.max_rel_error:.3e}")
    bad = [r for r in results if not r.passed]
    _say(f"{len(results) - len(bad)}/{len(results)} cases below {gradsuite.TOLERANCE:g} "
         f"in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if not bad else EXIT_GRADCHECK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossgait", description="Cross-modality gait recognition experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic paired dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on the train split")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from (its stored config is used)")
    t.add_argument("--variant", choices=("full", "two-stream"))
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int, help="override train.total_iters")
    t.add_argument("--cache", help="directory for preprocessed arrays")
    t.add_argument("--progress-every", type=int, default=100)
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("embed", help="write aligned embeddings for a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "test", "all"))
    e.add_argument("--modality", default="all")
    e.add_argument("--out", required=True)
    e.add_argument("--cache")
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_embed)

    v = sub.add_parser("eval", help="rank-k reports from embedding files")
    v.add_argument("--probe", required=True)
    v.add_argument("--gallery")
    v.add_argument("--protocol", default="all", help="all, or e.g. LiDAR->Camera")
    v.add_argument("--out", required=True)
    v.add_argument("--format", default="csv", choices=("csv", "json"))
    v.add_argument("--force", action="store_true")
    v.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and score a sweep of variants over seeds")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--sweep", required=True, help="K=0,1,2 | K=0..4 | cmfa=on,off | lambda=0,1,2 | "
                                                  "variant=full,two-stream")
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--seed0", type=int, default=0)
    a.add_argument("--iters", type=int)
    a.add_argument("--out", required=True)
    a.add_argument("--cache")
    a.add_argument("--force", action="store_true")
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.add_argument("--only", help="run only cases whose name contains this text")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (ProtocolError, EmbeddingFileError) as exc:
        code, msg = EXIT_PROTOCOL, f"protocol error: {exc}"
    except (CheckpointError, DimensionError) as exc:
        code, msg = EXIT_MISMATCH, f"checkpoint error: {exc}"
    except TrainingAborted as exc:
        code, msg = EXIT_NONFINITE, f"non-finite loss: {exc}"
    except OSError as exc:
        code, msg = EXIT_IO, f"I/O error: {exc}"
    except ValueError as exc:
        # remaining ValueErrors come from config-derived objects (TrainConfig, ModelConfig, ...)
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    print(f"crossgait {args.command}: {msg}", file=sys.stderr)
    return code


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
