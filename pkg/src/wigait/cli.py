"""Command-line batch tools: ``wigait <command> [inputs] --config --seed --out``.

Every command reads its settings from an INI config (or the snapshot in a
previous run's manifest), lets flags override single keys, writes its
outputs into ``--out`` and finishes by atomically writing a
``manifest.json`` there. Exit status is 0 only when every declared output
was written and read back successfully.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import read_model, train, write_model
from .config import Config, ConfigError, read_config
from .dsp import read_spectrogram, render_png, spectrogram_pipeline, write_spectrogram
from .features import (
    extract_rf_features,
    extract_video_features,
    read_feature_table,
    write_feature_table,
)
from .kinematics import MESH_FORMAT, ingest_mesh_sequence, place_in_scene, resample, write_mesh_sequence
from .manifest import ManifestError, RunManifest, atomic_write_text, read_manifest
from .protocol import Dataset, default_weight_grid, domain_adapt, evaluate, protocol_run
from .rfsim import read_recording, simulate_csi_walk, simulate_walk, write_recording
from .walker import InfeasibleGaitError, synthesize_walker

log = logging.getLogger("wigait")

LABELS = ("healthy", "unhealthy")
RECORDING_SUFFIX = ".wgrc"
SPECTROGRAM_SUFFIX = ".wgsg"
MODEL_SUFFIX = ".wgmm"


class CliError(RuntimeError):
    pass


def _seed_state(*parts) -> np.random.SeedSequence:
    words = []
    for p in parts:
        words.append(zlib.crc32(p.encode()) if isinstance(p, str) else int(p))
    return np.random.SeedSequence(words)


def _derived_seed(*parts) -> int:
    return int(_seed_state(*parts).generate_state(1)[0])


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc.strerror}") from None
    return path


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


class Run:
    """Shared plumbing of one command invocation."""

    def __init__(self, command: str, cfg: Config, seed: int, out: Path, params: dict):
        self.command = command
        self.cfg = cfg
        self.seed = int(seed)
        self.out = _mkdir(Path(out))
        self.started = time.time()
        self.manifest = RunManifest(
            command=command, argv=sys.argv[1:], config=cfg.to_dict(), seeds={"seed": self.seed}, info={},
        )
        self.manifest.info["params"] = params
        self.outputs: list[Path] = []

    def output(self, *paths: Path) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def finish(self, inputs=()) -> Path:
        missing = [p for p in self.outputs if not p.is_file()]
        if missing:
            raise CliError(f"declared output {missing[0]} was not written")
        self.manifest.add_inputs(inputs, self.out)
        self.manifest.add_outputs(self.outputs, self.out)
        return self.manifest.write(self.out, self.started)


# -- stages ---------------------------------------------------------------------------

def stage_synth(cfg: Config, seed: int, out: Path, count: int | None = None, group: str = "s", params=None) -> Path:
    """Write ``count`` walker mesh files per class."""
    s = cfg["synth"]
    count = s["count"] if count is None else count
    if count < 1:
        raise CliError("count must be at least 1")
    run = Run("synth", cfg, seed, out, params or {"count": count, "group": group})
    scene = cfg.scene()
    walkers = []
    for ci, label in enumerate(LABELS):
        for i in range(count):
            rng = np.random.default_rng(_seed_state(seed, "synth", group, ci, i))
            speed = s[f"{label}_speed"] + s[f"{label}_speed_spread"] * rng.uniform(-1, 1)
            cycle = s[f"{label}_cycle"] + s[f"{label}_cycle_spread"] * rng.uniform(-1, 1)
            mesh_seed = int(rng.integers(2**32))
            subject = f"{group}-{label[0]}{i:03d}"
            condition = "healthy" if label == "healthy" else s["unhealthy_condition"]
            gp = cfg.gait_params(label, speed, cycle)
            try:
                gp.check()
            except InfeasibleGaitError as exc:
                raise CliError(f"infeasible walker {subject}: {exc}") from None
            seq = synthesize_walker(
                gp, scene.walk_length / speed, s["fps"], mesh_seed,
                subject_id=subject, label=label, condition=condition,
            )
            path = run.out / f"{subject}.json"
            write_mesh_sequence(seq, path)
            ingest_mesh_sequence(path)
            run.output(path)
            walkers.append({"subject_id": subject, "label": label, "condition": condition,
                            "seed": mesh_seed, **gp.to_dict()})
    run.manifest.info["walkers"] = walkers
    return run.finish()


def _load_mesh(path: Path):
    try:
        return ingest_mesh_sequence(path)
    except FileNotFoundError:
        raise CliError(f"input not found: {path}") from None
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None


def stage_simulate(cfg: Config, seed: int, out: Path, inputs, capture: str | None = None, params=None) -> Path:
    """One recording per mesh file, resampled to ``[synth] sim_fps`` first when needed."""
    if capture is not None:
        cfg.set("capture", "mode", capture)
    mode = cfg.capture_mode()
    inputs = [Path(p) for p in inputs]
    if not inputs:
        raise CliError("simulate needs at least one mesh file")
    run = Run("simulate", cfg, seed, out, params or {"inputs": [str(p.resolve()) for p in inputs]})
    scene, scat = cfg.scene(), cfg.scattering()
    sim_fps = cfg.get("synth", "sim_fps")
    for path in inputs:
        seq = _load_mesh(path)
        if seq.units != "meter":
            raise CliError(f"{path}: units are {seq.units!r}; align the sequence to meters first")
        try:
            # placing first is cheaper and commutes with linear interpolation
            seq = place_in_scene(seq, scene)
            if seq.fps < sim_fps:
                seq = resample(seq, sim_fps)
            sim_seed = _derived_seed(seed, "simulate", seq.subject_id or path.stem)
            if mode == "measured":
                rec = simulate_csi_walk(seq, scene, scat, sim_seed, emu=cfg.emulation())
            else:
                rec = simulate_walk(seq, scene, scat, sim_seed)
        except ValueError as exc:
            raise CliError(f"{path}: {exc}") from None
        rec.provenance["source"] = path.name
        dst = run.out / (path.stem + RECORDING_SUFFIX)
        write_recording(rec, dst)
        read_recording(dst)
        run.output(dst, _sidecar(dst))
        log.info("simulated %s (%s, %.2f s)", path.name, mode, rec.duration)
    run.manifest.info["capture"] = mode
    return run.finish(inputs)


def _load_recording(path: Path):
    try:
        return read_recording(path)
    except FileNotFoundError:
        raise CliError(f"input not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise CliError(f"{path}: {exc}") from None


def _check_wavelength(path: Path, found: float, scene) -> None:
    if not np.isclose(found, scene.wavelength, rtol=1e-9):
        raise CliError(
            f"{path}: field 'wavelength' is {found!r} but the configured scene uses {scene.wavelength!r}"
        )


def stage_spectrogram(cfg: Config, seed: int, out: Path, inputs, render: bool = False, params=None) -> Path:
    inputs = [Path(p) for p in inputs]
    if not inputs:
        raise CliError("spectrogram needs at least one recording")
    run = Run("spectrogram", cfg, seed, out, params or {"inputs": [str(p.resolve()) for p in inputs],
                                                        "render": render})
    dsp = cfg.dsp()
    origins = {}
    for path in inputs:
        rec = _load_recording(path)
        sg = spectrogram_pipeline(rec, dsp, source_id=path.stem)
        dst = run.out / (path.stem + SPECTROGRAM_SUFFIX)
        write_spectrogram(sg, dst)
        read_spectrogram(dst)
        meta = {k: rec.provenance.get(k, "") for k in ("subject_id", "label", "condition")}
        meta.update(origin=rec.origin, wavelength=rec.wavelength, source=path.name)
        _write_json(_sidecar(dst), meta)
        run.output(dst, _sidecar(dst))
        origins[path.stem] = rec.origin
        if render:
            png = render_png(sg, run.out / (path.stem + ".png"))
            run.output(png)
    run.manifest.info["origins"] = origins
    return run.finish(inputs)


def _is_mesh(path: Path) -> bool:
    if path.suffix != ".json":
        return False
    with open(path) as fh:
        head = fh.read(256)
    return MESH_FORMAT in head


def _features_of(path: Path, cfg: Config, scene, dsp, origins: dict):
    fraction = cfg.get("features", "fraction")
    if not path.is_file():
        raise CliError(f"input not found: {path}")
    if path.suffix == RECORDING_SUFFIX:
        rec = _load_recording(path)
        _check_wavelength(path, rec.wavelength, scene)
        sg = spectrogram_pipeline(rec, dsp, source_id=path.stem)
        meta = rec.provenance
        origins[path.stem] = rec.origin
    elif path.suffix == SPECTROGRAM_SUFFIX:
        try:
            sg = read_spectrogram(path)
        except ValueError as exc:
            raise CliError(f"{path}: {exc}") from None
        side = _sidecar(path)
        meta = json.loads(side.read_text()) if side.is_file() else {}
        if "wavelength" in meta:
            _check_wavelength(side, meta["wavelength"], scene)
        origins[path.stem] = meta.get("origin", "")
    elif _is_mesh(path):
        seq = _load_mesh(path)
        origins[path.stem] = "video"
        return extract_video_features(
            seq, fraction, sample_id=path.stem, subject_id=seq.subject_id, label=seq.label,
            condition=seq.condition,
        )
    else:
        raise CliError(f"{path}: not a recording, spectrogram or mesh file")
    return extract_rf_features(
        sg, scene, fraction, sample_id=path.stem,
        subject_id=str(meta.get("subject_id", "")), label=str(meta.get("label", "unknown")),
        condition=str(meta.get("condition", "")),
    )


def stage_features(cfg: Config, seed: int, out: Path, inputs, name: str = "features.csv", params=None) -> Path:
    inputs = [Path(p) for p in inputs]
    if not inputs:
        raise CliError("features needs at least one input file")
    run = Run("features", cfg, seed, out, params or {"inputs": [str(p.resolve()) for p in inputs], "name": name})
    scene, dsp = cfg.scene(), cfg.dsp()
    origins: dict[str, str] = {}
    rows = [_features_of(p, cfg, scene, dsp, origins) for p in inputs]
    dst = write_feature_table(rows, run.out / name)
    read_feature_table(dst)
    run.output(dst)
    run.manifest.info["origins"] = origins
    run.manifest.info["paths"] = sorted(set(origins.values()))
    return run.finish(inputs)


def _load_table(path: Path) -> Dataset:
    try:
        return Dataset.from_features(read_feature_table(path))
    except FileNotFoundError:
        raise CliError(f"input not found: {path}") from None
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None


def _load_tables(paths) -> Dataset:
    sets = [_load_table(Path(p)) for p in paths]
    if not sets:
        raise CliError("no feature tables given")
    return Dataset(
        np.concatenate([s.x for s in sets]), np.concatenate([s.y for s in sets]),
        sum((s.subjects for s in sets), ()), sum((s.conditions for s in sets), ()),
    )


def stage_train(cfg: Config, seed: int, out: Path, tables, class_weight: float | None = None, params=None) -> Path:
    if class_weight is not None:
        cfg.set("train", "class_weight", class_weight)
    tables = [Path(p) for p in tables]
    run = Run("train", cfg, seed, out, params or {"tables": [str(p.resolve()) for p in tables]})
    ds = _load_tables(tables)
    model = train(ds.x, ds.y, cfg.train(seed))
    dst = write_model(model, run.out / ("model" + MODEL_SUFFIX))
    read_model(dst)
    run.output(dst)
    return run.finish(tables)


def _grid(cfg: Config) -> np.ndarray:
    a = cfg["adapt"]
    if a["grid_size"] < 1 or not 0 < a["grid_min"] <= a["grid_max"]:
        raise CliError("[adapt] needs grid_size >= 1 and 0 < grid_min <= grid_max")
    return default_weight_grid(a["grid_size"], a["grid_min"], a["grid_max"])


def stage_adapt(cfg: Config, seed: int, out: Path, tables, adapt_tables, params=None) -> Path:
    tables = [Path(p) for p in tables]
    adapt_tables = [Path(p) for p in adapt_tables]
    run = Run("adapt", cfg, seed, out, params or {
        "tables": [str(p.resolve()) for p in tables], "adapt": [str(p.resolve()) for p in adapt_tables]})
    train_set, adapt_set = _load_tables(tables), _load_tables(adapt_tables)
    tc = cfg.train(seed)
    w, winners = domain_adapt(train_set, adapt_set, _grid(cfg), cfg.get("adapt", "repeats"), tc)
    model = train(train_set.x, train_set.y, tc.replace(class_weight=w))
    dst = write_model(model, run.out / ("model" + MODEL_SUFFIX))
    read_model(dst)
    res = _write_json(run.out / "adapt.json", {"class_weight": w, "repeat_weights": winners})
    run.output(dst, res)
    return run.finish(tables + adapt_tables)


def stage_evaluate(cfg: Config, seed: int, out: Path, model_path, tables, params=None) -> Path:
    tables = [Path(p) for p in tables]
    model_path = Path(model_path)
    run = Run("evaluate", cfg, seed, out, params or {
        "model": str(model_path.resolve()), "tables": [str(p.resolve()) for p in tables]})
    try:
        model = read_model(model_path)
    except FileNotFoundError:
        raise CliError(f"input not found: {model_path}") from None
    except ValueError as exc:
        raise CliError(f"{model_path}: {exc}") from None
    report = evaluate(model, _load_tables(tables))
    report.write(run.out / "report.json", run.out / "report.csv")
    json.loads((run.out / "report.json").read_text())
    run.output(run.out / "report.json", run.out / "report.csv")
    return run.finish([model_path] + tables)


def stage_pipeline(cfg: Config, seed: int, out: Path, params=None) -> Path:
    """synth, simulate, spectrogram and features for a training and a test pool, then the protocol."""
    p = cfg["pipeline"]
    run = Run("pipeline", cfg, seed, out, params or {})
    atomic_write_text(run.out / "config.ini", cfg.to_ini())
    run.output(run.out / "config.ini")
    tables = {}
    for group, count, capture in (("train", p["train_per_class"], "synthetic"),
                                  ("pool", p["pool_per_class"], "measured")):
        base = run.out / group
        t0 = time.time()
        stage_synth(cfg, seed, base / "mesh", count=count, group=group)
        meshes = sorted((base / "mesh").glob("*.json"))
        meshes = [m for m in meshes if m.name != "manifest.json"]
        stage_simulate(cfg, seed, base / "recordings", meshes, capture=capture)
        recs = sorted((base / "recordings").glob("*" + RECORDING_SUFFIX))
        stage_spectrogram(cfg, seed, base / "spectrograms", recs)
        sgs = sorted((base / "spectrograms").glob("*" + SPECTROGRAM_SUFFIX))
        stage_features(cfg, seed, base, sgs, name="features.csv")
        tables[group] = base / "features.csv"
        run.output(tables[group])
        log.info("%s set: %d walkers in %.1f s", group, 2 * count, time.time() - t0)
    cfg.set("capture", "mode", "synthetic")
    t0 = time.time()
    models: list = []
    report = protocol_run(
        _load_table(tables["train"]), _load_table(tables["pool"]), cfg.get("protocol", "rounds"),
        cfg.train(seed), _grid(cfg), cfg.get("adapt", "repeats"), seed,
        progress=lambda r, info: log.info("round %d: weight %.4g, per-class %.3f", r, info["class_weight"],
                                          info["per_class"]),
        models=models,
    )
    _mkdir(run.out / "models")
    for r, m in enumerate(models):
        dst = write_model(m, run.out / "models" / f"round{r}{MODEL_SUFFIX}")
        read_model(dst)
        run.output(dst)
    report.write(run.out / "report.json", run.out / "report.csv")
    run.output(run.out / "report.json", run.out / "report.csv")
    log.info("protocol: %.1f s, per-class accuracy %.3f", time.time() - t0, report.per_class_accuracy)
    run.manifest.info["per_class_accuracy"] = report.per_class_accuracy
    return run.finish()


# -- argument handling -------------------------------------------------------------

def _common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="INI config file, or a manifest.json to reuse its config snapshot")
    sp.add_argument("--seed", type=int, help="master seed (default: [pipeline] seed)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override a single config key (repeatable)")
    sp.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wigait", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"wigait {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize walker mesh sequences")
    sp.add_argument("--count", type=int, help="walkers per class ([synth] count)")
    sp.add_argument("--group", default="s", help="subject id prefix")
    _common(sp)

    sp = sub.add_parser("simulate", help="simulate channel recordings from mesh files")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--capture", choices=("synthetic", "measured"), help="[capture] mode")
    _common(sp)

    sp = sub.add_parser("spectrogram", help="Doppler spectrograms of recordings")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--render", action="store_true", help="also write a grayscale PNG per input")
    sp.add_argument("--tapers", type=int, help="[dsp] tapers")
    sp.add_argument("--pad", type=int, help="[dsp] pad")
    _common(sp)

    sp = sub.add_parser("features", help="gait features of recordings, spectrograms or mesh files")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--fraction", type=float, help="[features] fraction")
    _common(sp)

    sp = sub.add_parser("train", help="train a classifier on feature tables")
    sp.add_argument("tables", nargs="+")
    sp.add_argument("--class-weight", type=float, help="[train] class_weight")
    _common(sp)

    sp = sub.add_parser("adapt", help="search the unhealthy-class loss weight on adaptation subjects")
    sp.add_argument("tables", nargs="+", help="training feature tables")
    sp.add_argument("--adapt", nargs="+", required=True, help="adaptation feature tables")
    _common(sp)

    sp = sub.add_parser("evaluate", help="evaluate a model on feature tables")
    sp.add_argument("tables", nargs="+")
    sp.add_argument("--model", required=True)
    _common(sp)

    sp = sub.add_parser("pipeline", help="end-to-end experiment with the sampling protocol")
    sp.add_argument("--train-per-class", type=int, help="[pipeline] train_per_class")
    sp.add_argument("--pool-per-class", type=int, help="[pipeline] pool_per_class")
    _common(sp)

    sp = sub.add_parser("verify", help="re-hash the outputs listed in a manifest")
    sp.add_argument("manifest")

    sp = sub.add_parser("rerun", help="repeat a run from its manifest into a new directory")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("-v", "--verbose", action="store_true")
    return ap


_FLAG_KEYS = {
    "count": ("synth", "count"),
    "capture": ("capture", "mode"),
    "tapers": ("dsp", "tapers"),
    "pad": ("dsp", "pad"),
    "fraction": ("features", "fraction"),
    "class_weight": ("train", "class_weight"),
    "train_per_class": ("pipeline", "train_per_class"),
    "pool_per_class": ("pipeline", "pool_per_class"),
}


def _resolve_config(args) -> tuple[Config, int]:
    cfg = read_config(args.config)
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not (sep and dot):
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set(section, name, value, where="--set")
    for flag, (section, key) in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(section, key, value, where=f"--{flag.replace('_', '-')}")
    if args.seed is not None:
        cfg.set("pipeline", "seed", args.seed)
    return cfg, int(cfg.get("pipeline", "seed"))


def rerun(manifest_path, out) -> Path:
    """Replay a recorded run using only its config snapshot, seed and parameters."""
    man = read_manifest(manifest_path, verify=False)
    cfg = Config(man.config)
    seed = int(man.seeds["seed"])
    params = dict(man.info.get("params", {}))
    out = Path(out)
    cmd = man.command
    if cmd == "synth":
        return stage_synth(cfg, seed, out, count=params["count"], group=params["group"], params=params)
    if cmd == "simulate":
        return stage_simulate(cfg, seed, out, params["inputs"], params=params)
    if cmd == "spectrogram":
        return stage_spectrogram(cfg, seed, out, params["inputs"], render=params["render"], params=params)
    if cmd == "features":
        return stage_features(cfg, seed, out, params["inputs"], name=params["name"], params=params)
    if cmd == "train":
        return stage_train(cfg, seed, out, params["tables"], params=params)
    if cmd == "adapt":
        return stage_adapt(cfg, seed, out, params["tables"], params["adapt"], params=params)
    if cmd == "evaluate":
        return stage_evaluate(cfg, seed, out, params["model"], params["tables"], params=params)
    if cmd == "pipeline":
        return stage_pipeline(cfg, seed, out, params=params)
    raise CliError(f"{manifest_path}: unknown command {cmd!r}")


def dispatch(args) -> Path:
    if args.command == "verify":
        man = read_manifest(args.manifest)
        print(f"{args.manifest}: {len(man.outputs)} outputs verified")
        return Path(args.manifest)
    if args.command == "rerun":
        return rerun(args.manifest, args.out)
    cfg, seed = _resolve_config(args)
    out = Path(args.out)
    if args.command == "synth":
        return stage_synth(cfg, seed, out, group=args.group)
    if args.command == "simulate":
        return stage_simulate(cfg, seed, out, args.inputs)
    if args.command == "spectrogram":
        return stage_spectrogram(cfg, seed, out, args.inputs, render=args.render)
    if args.command == "features":
        return stage_features(cfg, seed, out, args.inputs)
    if args.command == "train":
        return stage_train(cfg, seed, out, args.tables)
    if args.command == "adapt":
        return stage_adapt(cfg, seed, out, args.tables, args.adapt)
    if args.command == "evaluate":
        return stage_evaluate(cfg, seed, out, args.model, args.tables)
    if args.command == "pipeline":
        return stage_pipeline(cfg, seed, out)
    raise CliError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(asctime)s %(message)s", datefmt="%H:%M:%S",
    )
    try:
        dispatch(args)
    except (CliError, ConfigError, ManifestError, InfeasibleGaitError) as exc:
        print(f"wigait {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"wigait {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        where = f" {exc.filename}" if exc.filename else ""
        print(f"wigait {args.command}: error:{where}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
