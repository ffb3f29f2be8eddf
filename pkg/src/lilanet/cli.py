"""Command-line entry point: ``lilanet <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration failure.
"""
from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import experiments as ex
from . import geometry_io as gio
from . import latent_eval as le
from . import synthetic
from .model import ConfigError, IdentityModel, ModelConfig, SkipVariant, build
from .preprocess import (PipelineError, PreprocessConfig, ProcessedCloud, normalize_unit_sphere,
                         per_cloud_seed, preprocess_pipeline, random_downsample, reports_to_json)
from .training import (CheckpointError, TrainConfig, evaluate, load_checkpoint, reconstruct,
                       save_checkpoint, train)

log = logging.getLogger("lilanet")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------- run manifest

def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    argv: list[str]
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)
    version: str = __version__
    build: str = ""
    exit_code: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------- config resolution

def _parse_value(kind, raw: str, name: str):
    try:
        if kind in ("bool", bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if "list[int]" in str(kind):
            return [int(x) for x in raw.replace(",", " ").split()]
        if "list[float]" in str(kind):
            return [float(x) for x in raw.replace(",", " ").split()]
        if "list[SkipVariant]" in str(kind):
            return [SkipVariant(x) for x in raw.replace(",", " ").split()]
        if "SkipVariant" in str(kind):
            return SkipVariant(raw.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r}") from None


def _from_section(cls, section: dict, base=None):
    obj = base if base is not None else cls()
    known = {f.name: f for f in fields(cls)}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(key, f"unknown key for {cls.__name__}")
        setattr(obj, key, _parse_value(known[key].type, raw, key))
    if hasattr(obj, "__post_init__"):
        obj.__post_init__()
    return obj


@dataclass
class SvmConfig:
    C: float = 1.0
    epochs: int = 100


@dataclass
class Settings:
    model: ModelConfig
    train: TrainConfig
    preprocess: PreprocessConfig
    experiment: ex.ExperimentSpec
    svm: SvmConfig
    seed: int = 0

    def to_dict(self) -> dict:
        exp = asdict(self.experiment)
        exp["variants"] = [v.value for v in self.experiment.variants]
        return {"model": self.model.to_dict(), "train": asdict(self.train),
                "preprocess": asdict(self.preprocess), "experiment": exp,
                "svm": asdict(self.svm), "seed": self.seed}


def resolve_settings(args) -> Settings:
    """Defaults, then the config file, then flags."""
    toy = getattr(args, "toy", False)
    model = ex.toy_model_config() if toy else ModelConfig()
    train_cfg = ex.toy_train_config() if toy else TrainConfig()
    pre = PreprocessConfig()
    exp = ex.ExperimentSpec.desk(getattr(args, "kind", None) or "skip_ablation") if toy else ex.ExperimentSpec()
    if getattr(args, "kind", None):
        exp.kind = args.kind
    svm = SvmConfig()
    if args.config:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(args.config) as f:
                cp.read_file(f)
        except OSError as e:
            raise ConfigError("config", str(e)) from None
        except configparser.Error as e:
            raise ConfigError("config", str(e).splitlines()[0]) from None
        targets = {"model": (ModelConfig, model), "train": (TrainConfig, train_cfg),
                   "experiment": (ex.ExperimentSpec, exp), "svm": (SvmConfig, svm)}
        for name in cp.sections():
            if name == "preprocess":
                pre = PreprocessConfig.from_mapping({**asdict(pre), **dict(cp[name])})
            elif name in targets:
                cls, obj = targets[name]
                _from_section(cls, dict(cp[name]), obj)
            else:
                raise ConfigError(name, "unknown config section")
    seed = train_cfg.seed
    if args.seed is not None:
        seed = args.seed
    train_cfg.seed = seed
    pre.seed = seed
    model.init_seed = seed
    if args.target_points is not None:
        pre.target_points = args.target_points
        model.points = args.target_points
    elif toy:
        pre.target_points = model.points
    if args.radius is not None:
        pre.crop_radius = args.radius
    if args.skip_variant is not None:
        model.skip = SkipVariant(args.skip_variant)
    if args.latent_dim is not None:
        if args.latent_dim != model.latent_dim:
            model.latent_dim = args.latent_dim
            model.encoder_widths = model.encoder_widths[:-1] + [args.latent_dim]
            if model.latent_dim < 1:
                raise ConfigError("latent_dim", "must be positive")
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if args.batch_size is not None:
        train_cfg.batch_size = args.batch_size
    if args.lr is not None:
        train_cfg.learning_rate = args.lr
    if args.precision is not None:
        train_cfg.precision = 32 if args.precision == "f32" else 64
    model.validate()
    train_cfg.validate()
    pre.validate()
    exp.validate()
    if svm.C <= 0:
        raise ConfigError("C", "must be positive")
    return Settings(model, train_cfg, pre, exp, svm, seed)


# ---------------------------------------------------------------- datasets

CLOUD_SUFFIXES = (".xyz", ".ply", ".off")


def _cloud_files(path: Path) -> list[tuple[Path, Optional[str], str]]:
    """(file, label, split) triples from a directory, a manifest, or a single file."""
    if path.is_dir():
        mf = path / "manifest.jsonl"
        if mf.exists():
            m = gio.DatasetManifest.load(mf)
            return [(Path(e.path), e.label, e.split) for e in m.entries]
        return [(p, None, "train") for p in sorted(path.iterdir()) if p.suffix.lower() in CLOUD_SUFFIXES]
    if path.suffix == ".jsonl":
        m = gio.DatasetManifest.load(path)
        return [(Path(e.path), e.label, e.split) for e in m.entries]
    return [(path, None, "train")]


def load_clouds(args, settings: Settings, split: str = "all") -> list[ProcessedCloud]:
    if getattr(args, "toy", False) and not args.data:
        return synthetic.toy_dataset(100, settings.model.points, seed=settings.seed)
    if not args.data:
        raise ConfigError("data", "pass --data or --toy")
    entries = _cloud_files(Path(args.data))
    if split != "all" and any(s == split for _, _, s in entries):
        entries = [e for e in entries if e[2] == split]
    clouds = []
    M = settings.model.points
    for i, (p, label, _) in enumerate(entries):
        try:
            raw = gio.read_cloud(p, mesh_samples=M, seed=per_cloud_seed(settings.seed, i))
        except (OSError, ValueError) as e:
            raise StageError("load", f"{p}: {e}") from e
        if len(raw) != M:
            raw = random_downsample(raw, M, per_cloud_seed(settings.seed, i))
        pc = normalize_unit_sphere(raw, source_id=str(p))
        pc.label = label
        clouds.append(pc)
    if not clouds:
        raise StageError("load", f"no clouds found under {args.data}")
    return clouds


def _load_model(args, settings: Settings):
    if getattr(args, "identity", False):
        return IdentityModel()
    if not args.checkpoint:
        raise ConfigError("checkpoint", "required")
    try:
        model = load_checkpoint(args.checkpoint).model
    except (OSError, CheckpointError) as e:
        raise StageError("load_checkpoint", str(e)) from e
    if args.latent_dim is not None and args.latent_dim != model.config.latent_dim:
        raise ConfigError("latent_dim", f"checkpoint has {model.config.latent_dim}, flag says {args.latent_dim}")
    return model


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_synth(args, settings: Settings) -> list[Path]:
    out = _out_dir(args)
    clouds = synthetic.toy_dataset(args.n_shapes, settings.model.points, seed=settings.seed)
    entries = []
    paths = []
    rng = np.random.default_rng(settings.seed)
    test = set(rng.permutation(len(clouds))[int(np.floor(settings.train.split_train_fraction * len(clouds))):].tolist())
    for i, c in enumerate(clouds):
        p = out / f"{c.source_id}.xyz"
        gio.write_xyz(c.points, p)
        paths.append(p)
        entries.append(gio.ManifestEntry(p.name, c.label, "test" if i in test else "train"))
    mf = out / "manifest.jsonl"
    gio.DatasetManifest(entries).save(mf)
    return paths + [mf]


def cmd_preprocess(args, settings: Settings) -> list[Path]:
    out = _out_dir(args)
    entries = _cloud_files(Path(args.data)) if args.data else []
    if not entries:
        raise ConfigError("data", "no input clouds")
    outputs, failed, kept = [], [], []
    for i, (p, label, split) in enumerate(entries):
        cfg = PreprocessConfig(**{**asdict(settings.preprocess), "seed": per_cloud_seed(settings.seed, i)})
        try:
            raw = gio.read_cloud(p, mesh_samples=cfg.target_points, seed=cfg.seed)
            processed, reports = preprocess_pipeline(raw, cfg)
        except (OSError, ValueError, PipelineError) as e:
            log.error("preprocess failed for %s: %s", p, e)
            failed.append(str(p))
            continue
        dst = out / (p.stem + ".xyz")
        gio.write_xyz(processed.points, dst)
        rep = out / (p.stem + ".report.json")
        rep.write_text(reports_to_json(reports))
        outputs += [dst, rep]
        kept.append(gio.ManifestEntry(dst.name, label, split))
    if kept:
        mf = out / "manifest.jsonl"
        gio.DatasetManifest(kept).save(mf)
        outputs.append(mf)
    if failed:
        raise StageError("preprocess", f"{len(failed)} of {len(entries)} inputs failed: {failed}")
    return outputs


def cmd_train(args, settings: Settings) -> list[Path]:
    out = _out_dir(args)
    clouds = load_clouds(args, settings, split="train")
    model = build(settings.model, settings.train.dtype)
    res = train(model, clouds, settings.train,
                on_epoch=lambda e, l: log.info("epoch %d mean CD %.6g", e, l))
    ckpt = out / "model.lila"
    save_checkpoint(model, ckpt, res.adam, res.epoch, res.history)
    loss = out / "loss.csv"
    loss.write_text("epoch,cd\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(res.history)))
    return [ckpt, loss]


def cmd_eval(args, settings: Settings) -> list[Path]:
    out = _out_dir(args)
    model = _load_model(args, settings)
    clouds = load_clouds(args, settings, split=args.split)
    ev = evaluate(model, clouds, emd_mode=args.emd_mode, compute_emd=not args.no_emd)
    p = out / "metrics.json"
    p.write_text(ev.report.to_json() + "\n")
    print(ev.report.to_json())
    return [p]


def cmd_reconstruct(args, settings: Settings) -> list[Path]:
    out = _out_dir(args)
    model = _load_model(args, settings)
    model.eval()
    clouds = load_clouds(args, settings, split=args.split)
    paths = []
    for i, c in enumerate(clouds):
        R = reconstruct(model, c.points.astype(getattr(model, "dtype", np.float64)))
        name = Path(c.source_id).stem if c.source_id else f"cloud_{i:04d}"
        p = out / f"{name}.rec.xyz"
        gio.write_xyz(R, p)
        paths.append(p)
    return paths


def cmd_embed(args, settings: Settings) -> list[Path]:
    out = _out_dir(args)
    model = _load_model(args, settings)
    if isinstance(model, IdentityModel):
        raise ConfigError("identity", "embedding needs a trained checkpoint")
    clouds = load_clouds(args, settings, split=args.split)
    try:
        emb = le.embed(model, clouds)
    except le.LabelError as e:
        raise StageError("embed", str(e)) from e
    p = out / "embeddings.csv"
    emb.save_csv(p)
    return [p]


def _read_embeddings(path, names=None) -> le.EmbeddingSet:
    try:
        return le.EmbeddingSet.from_csv(Path(path).read_text(), names)
    except OSError as e:
        raise StageError("classify", str(e)) from e


def cmd_classify(args, settings: Settings) -> list[Path]:
    out = _out_dir(args)
    if not args.train_embeddings or not args.test_embeddings:
        raise ConfigError("embeddings", "--train-embeddings and --test-embeddings are required")
    tr = _read_embeddings(args.train_embeddings)
    te = _read_embeddings(args.test_embeddings, tr.class_names)
    if args.latent_dim is not None and args.latent_dim != tr.dim:
        raise ConfigError("latent_dim", f"embeddings have {tr.dim} dims, flag says {args.latent_dim}")
    if te.dim != tr.dim:
        raise ConfigError("latent_dim", f"train embeddings have {tr.dim} dims, test has {te.dim}")
    try:
        svm = le.train_linear_svm(tr, C=settings.svm.C, epochs=settings.svm.epochs, seed=settings.seed)
    except le.LabelError as e:
        raise StageError("classify", str(e)) from e
    acc = le.accuracy(svm, te)
    cm = le.confusion_matrix(svm, te)
    pa = out / "accuracy.json"
    pa.write_text(json.dumps({"accuracy": acc, "n_test": len(te), "classes": tr.class_names}, indent=2) + "\n")
    pc = out / "confusion.csv"
    pc.write_text(le.confusion_csv(cm, tr.class_names))
    ps = out / "svm.json"
    ps.write_text(svm.to_json())
    print(json.dumps({"accuracy": acc}))
    return [pa, pc, ps]


def _train_test(args, settings: Settings):
    if getattr(args, "toy", False) and not args.data:
        tr = synthetic.toy_dataset(100, settings.model.points, seed=settings.seed)
        te = synthetic.toy_dataset(30, settings.model.points, seed=settings.seed + 1)
        return tr, te
    return load_clouds(args, settings, "train"), load_clouds(args, settings, "test")


def cmd_ablate(args, settings: Settings) -> list[Path]:
    out = _out_dir(args)
    tr, te = _train_test(args, settings)
    rows = ex.run_skip_ablation(tr, te, settings.model, settings.train, settings.experiment.variants,
                                compute_emd=not args.no_emd, workers=args.workers)
    p = ex.write_text(out / "ablation.csv", ex.ablation_csv(rows))
    return [p]


def cmd_experiment(args, settings: Settings) -> list[Path]:
    out = _out_dir(args)
    spec = settings.experiment
    if spec.kind == "skip_ablation":
        return cmd_ablate(args, settings)
    if spec.kind == "data_fraction":
        tr, te = _train_test(args, settings)
        rows = ex.run_data_fraction_experiment(tr, te, settings.model, settings.train, spec,
                                               compute_emd=not args.no_emd, workers=args.workers)
        return [ex.write_text(out / "data_fraction.csv", ex.fraction_csv(rows)),
                ex.write_text(out / "data_fraction_runs.csv", ex.fraction_runs_csv(rows))]
    if not getattr(args, "toy", False):
        raise ConfigError("kind", "cloud_size needs --toy (datasets are generated per M)")
    datasets = {M: (synthetic.toy_dataset(100, M, seed=settings.seed),
                    synthetic.toy_dataset(30, M, seed=settings.seed + 1)) for M in spec.cloud_sizes}
    rows = ex.run_cloud_size_experiment(datasets, settings.model, settings.train,
                                        compute_emd=not args.no_emd, workers=1)
    return [ex.write_text(out / "cloud_size.csv", ex.cloud_size_csv(rows))]


COMMANDS = {
    "synth": (cmd_synth, "write the bundled synthetic dataset as XYZ files plus a manifest"),
    "preprocess": (cmd_preprocess, "ground removal, crop, resample and normalize raw clouds"),
    "train": (cmd_train, "train an autoencoder; writes model.lila and loss.csv"),
    "eval": (cmd_eval, "reconstruction metrics; writes metrics.json"),
    "reconstruct": (cmd_reconstruct, "write reconstructions as XYZ files"),
    "embed": (cmd_embed, "latent vectors as embeddings.csv"),
    "classify": (cmd_classify, "linear SVM on embeddings; accuracy.json and confusion.csv"),
    "ablate": (cmd_ablate, "skip-variant ablation table"),
    "experiment": (cmd_experiment, "data-fraction or cloud-size sweep"),
}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("shared")
    d_model, d_train, d_pre = ModelConfig(), TrainConfig(), PreprocessConfig()
    g.add_argument("--config", help="INI file with [model], [train], [preprocess], [experiment], [svm] sections")
    g.add_argument("--seed", type=int, default=None, help=f"global seed (default {d_train.seed})")
    g.add_argument("--deterministic", action="store_true", help="single-threaded BLAS, fixed reduction order")
    g.add_argument("--threads", type=int, default=None, help="BLAS thread cap (default: library choice)")
    g.add_argument("--target-points", type=int, default=None,
                   help=f"points per cloud M (default {d_pre.target_points})")
    g.add_argument("--radius", type=float, default=None, help=f"crop radius in metres (default {d_pre.crop_radius})")
    g.add_argument("--skip-variant", choices=[v.value for v in SkipVariant], default=None,
                   help=f"skip routing (default {d_model.skip.value})")
    g.add_argument("--latent-dim", type=int, default=None, help=f"latent size L (default {d_model.latent_dim})")
    g.add_argument("--epochs", type=int, default=None, help=f"(default {d_train.epochs})")
    g.add_argument("--batch-size", type=int, default=None, help=f"(default {d_train.batch_size})")
    g.add_argument("--lr", type=float, default=None, help=f"Adam learning rate (default {d_train.learning_rate})")
    g.add_argument("--precision", choices=["f32", "f64"], default=None, help="(default f32)")
    g.add_argument("--out", default="out", help="output directory (default out)")
    g.add_argument("--data", default=None, help="directory, manifest.jsonl or single cloud file")
    g.add_argument("--toy", action="store_true",
                   help="toy widths, M=256 and toy training schedule; without --data, also the bundled synthetic dataset")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="lilanet", description="Point-cloud autoencoder toolkit",
                                     epilog="lilanet rerun MANIFEST [--out DIR] replays a recorded run")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "synth":
            p.add_argument("--n-shapes", type=int, default=100, help="(default 100)")
        if name in ("eval", "reconstruct", "embed"):
            p.add_argument("--checkpoint", default=None)
            p.add_argument("--split", choices=["train", "test", "all"], default="all",
                           help="manifest split to use (default all)")
        if name in ("eval", "reconstruct"):
            p.add_argument("--identity", action="store_true", help="test hook: reconstruction equals input")
        if name == "eval":
            p.add_argument("--emd-mode", choices=["auto", "exact", "approx"], default="auto", help="(default auto)")
        if name in ("eval", "ablate", "experiment"):
            p.add_argument("--no-emd", action="store_true", help="skip the EMD column")
        if name in ("ablate", "experiment"):
            p.add_argument("--workers", type=int, default=1, help="parallel training runs (default 1)")
        if name == "experiment":
            p.add_argument("--kind", choices=list(ex.KINDS), default=None, help="(default skip_ablation)")
        if name == "classify":
            p.add_argument("--train-embeddings", default=None)
            p.add_argument("--test-embeddings", default=None)
    return parser


def _limit_threads(n: Optional[int]):
    if n is None:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _replay_argv(argv: list[str]) -> list[str]:
    """``rerun MANIFEST [--out DIR]`` expands to the argv recorded in MANIFEST."""
    p = argparse.ArgumentParser(prog="lilanet rerun", description="replay the command recorded in a run manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write to DIR instead of the recorded output directory")
    a = p.parse_args(argv)
    try:
        recorded = RunManifest.from_json(Path(a.manifest).read_text()).argv
    except (OSError, ValueError, TypeError) as e:
        p.error(f"cannot read manifest: {e}")
    if a.out is None:
        return recorded
    cleaned, skip = [], False
    for tok in recorded:
        if skip:
            skip = False
        elif tok == "--out":
            skip = True
        elif not tok.startswith("--out="):
            cleaned.append(tok)
    return cleaned + ["--out", a.out]


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["rerun"]:
        argv = _replay_argv(argv[1:])
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        settings = resolve_settings(args)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("threads", "must be >= 1")
    except ConfigError as e:
        print(f"config error [{e.field}]: {e}", file=sys.stderr)
        return EXIT_CONFIG
    limiter = _limit_threads(1 if args.deterministic else args.threads)
    fn = COMMANDS[args.command][0]
    manifest = RunManifest(args.command, settings.to_dict(), settings.seed, argv, started, build=build_id())
    code = EXIT_OK
    t0 = time.perf_counter()
    try:
        outputs = fn(args, settings)
        manifest.outputs = [str(p) for p in outputs]
    except ConfigError as e:
        print(f"config error [{e.field}]: {e}", file=sys.stderr)
        code = EXIT_CONFIG
    except StageError as e:
        print(f"runtime error [{e.stage}]: {e}", file=sys.stderr)
        code = EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"runtime error [{args.command}]: {e}", file=sys.stderr)
        code = EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    manifest.finished = _now()
    manifest.exit_code = code
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_manifest.json").write_text(manifest.to_json() + "\n")
    except OSError as e:
        print(f"could not write run manifest: {e}", file=sys.stderr)
        return code or EXIT_RUNTIME
    return code


if __name__ == "__main__":
    sys.exit(main())
