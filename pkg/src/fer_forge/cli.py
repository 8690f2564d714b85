"""Command-line entry point for the full pipeline.

Subcommands: train, sweep, eval, predict, detect, gradcheck, histogram.
Settings come from flat key=value manifest files, CLI flags, or both;
flags win. Exit codes are stable: 0 success, 1 computational failure,
2 usage or input error.
"""

import argparse
import importlib.resources
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import facedetect as fd
from . import models as M
from . import train as T
from . import tree as tr
from .gradcheck import gradcheck_architecture
from .optim import OptimizerConfig

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

MODEL_NAMES = ("tree", "ffnn", "simple_cnn", "proposed_cnn")
DEFAULT_LR = {"sgd": 0.01, "rmsprop": 0.001, "adam": 0.001}

MANIFEST_KEYS = {
    "model": str,
    "data": str,
    "out": str,
    "optimizer": str,
    "lr": float,
    "decay": float,
    "batch": int,
    "epochs": int,
    "seed": int,
    "strict_epoch_eval": lambda s: s.lower() in ("1", "true", "yes"),
    "cascade": str,
    "image": str,
    "model_file": str,
    "min_neighbors": int,
    "scale_factor": float,
}


class UsageError(Exception):
    """Bad flags, missing files or malformed inputs; maps to exit code 2."""


def parse_manifest(path: str) -> dict:
    """Flat key = value file; repeated ``cell`` keys accumulate into a list."""
    if not os.path.isfile(path):
        raise UsageError(f"manifest not found: {path}")
    settings: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_num, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_num}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "cell":
                settings.setdefault("cell", []).append(value)
                continue
            if key not in MANIFEST_KEYS:
                raise UsageError(f"{path}:{line_num}: unknown key {key!r}")
            if key in settings:
                raise UsageError(f"{path}:{line_num}: duplicate key {key!r}")
            try:
                settings[key] = MANIFEST_KEYS[key](value)
            except ValueError:
                raise UsageError(f"{path}:{line_num}: bad value {value!r} for {key}") from None
    return settings


def _merge(args, manifest: dict, key: str, default=None):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return manifest.get(key, default)


def _require_file(path: str | None, what: str) -> str:
    if not path:
        raise UsageError(f"missing required {what}")
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_split(data_path: str, seed: int):
    records = D.parse_fer_csv(data_path)
    if not records:
        raise UsageError(f"dataset {data_path} contains no records")
    return D.split_dataset(records, seed=seed)


def _optimizer_config(optimizer: str, lr, decay) -> OptimizerConfig:
    optimizer = optimizer.lower()
    if optimizer not in DEFAULT_LR:
        raise UsageError(f"unknown optimizer {optimizer!r}")
    if lr is None:
        lr = DEFAULT_LR[optimizer]
    try:
        return OptimizerConfig(kind=optimizer, learning_rate=lr, decay=decay or 0.0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


@dataclass
class TrainSettings:
    model: str
    data: str
    out: str
    optimizer: str = "adam"
    lr: float | None = None
    decay: float = 0.0
    batch: int = 128
    epochs: int = 100
    seed: int = 42
    strict_epoch_eval: bool = False


def _resolve_train_settings(args) -> TrainSettings:
    manifest = parse_manifest(args.manifest) if args.manifest else {}
    model = _merge(args, manifest, "model")
    if model not in MODEL_NAMES:
        raise UsageError(f"--model must be one of {MODEL_NAMES}, got {model!r}")
    out = _merge(args, manifest, "out")
    if not out:
        raise UsageError("missing required output directory (--out)")
    return TrainSettings(
        model=model,
        data=_require_file(_merge(args, manifest, "data"), "dataset"),
        out=out,
        optimizer=_merge(args, manifest, "optimizer", "adam"),
        lr=_merge(args, manifest, "lr"),
        decay=_merge(args, manifest, "decay", 0.0),
        batch=_merge(args, manifest, "batch", 128),
        epochs=_merge(args, manifest, "epochs", 100),
        seed=_merge(args, manifest, "seed", 42),
        strict_epoch_eval=bool(_merge(args, manifest, "strict_epoch_eval", False)),
    )


def _train_tree(settings: TrainSettings, train_ds, test_ds) -> float:
    root = tr.fit_tree(train_ds.images, train_ds.labels, tr.TreeConfig(seed=settings.seed))
    tr.save_tree(root, os.path.join(settings.out, "tree.txt"))
    preds = [tr.predict_tree(root, test_ds.images[i]) for i in range(len(test_ds))]
    return T.accuracy(preds, test_ds.labels)


def _train_network(settings: TrainSettings, train_ds, test_ds) -> float:
    net = M.BUILDERS[settings.model](seed=settings.seed)
    cfg = T.TrainConfig(
        optimizer=_optimizer_config(settings.optimizer, settings.lr, settings.decay),
        batch_size=settings.batch,
        max_epochs=settings.epochs,
        seed=settings.seed,
        strict_epoch_eval=settings.strict_epoch_eval,
    )
    net, logs, stop_reason = T.train(net, train_ds, cfg)
    M.save_model(net, os.path.join(settings.out, f"{settings.model}.femo"))
    with open(os.path.join(settings.out, "epochs.csv"), "w", encoding="utf-8") as fh:
        fh.write(T.epoch_logs_csv(logs))
    test_acc, _, _ = T.evaluate(net, test_ds)
    print(f"stop_reason={stop_reason} epochs_ran={len(logs)}")
    return test_acc


def cmd_train(args) -> int:
    settings = _resolve_train_settings(args)
    train_ds, test_ds = _load_split(settings.data, settings.seed)
    os.makedirs(settings.out, exist_ok=True)
    if settings.model == "tree":
        test_acc = _train_tree(settings, train_ds, test_ds)
    else:
        test_acc = _train_network(settings, train_ds, test_ds)
    line = f"test_accuracy={test_acc:.4f}"
    with open(os.path.join(settings.out, "result.txt"), "w", encoding="utf-8") as fh:
        fh.write(line + "\n")
    print(line)
    return EXIT_OK


def _parse_cell(raw: str, default_model: str):
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) == 6:
        model, parts = parts[0], parts[1:]
    elif len(parts) == 5:
        model = default_model
    else:
        raise UsageError(f"bad cell {raw!r}: want [model,]optimizer,batch,epochs,lr,decay")
    if model not in MODEL_NAMES:
        raise UsageError(f"bad cell {raw!r}: unknown model {model!r}")
    try:
        return {
            "model": model,
            "optimizer": parts[0],
            "batch": int(parts[1]),
            "epochs": int(parts[2]),
            "lr": float(parts[3]),
            "decay": float(parts[4]),
        }
    except ValueError:
        raise UsageError(f"bad cell {raw!r}: non-numeric field") from None


def _run_sweep_cell(job) -> dict:
    cell, data_path, out_dir, seed, strict = job
    try:
        settings = TrainSettings(
            model=cell["model"],
            data=data_path,
            out=out_dir,
            optimizer=cell["optimizer"],
            lr=cell["lr"],
            decay=cell["decay"],
            batch=cell["batch"],
            epochs=cell["epochs"],
            seed=seed,
            strict_epoch_eval=strict,
        )
        train_ds, test_ds = _load_split(data_path, seed)
        os.makedirs(out_dir, exist_ok=True)
        if cell["model"] == "tree":
            acc = _train_tree(settings, train_ds, test_ds)
        else:
            acc = _train_network(settings, train_ds, test_ds)
        return {**cell, "accuracy": f"{acc:.4f}", "error": ""}
    except Exception as exc:  # per-cell failures must not kill the sweep
        return {**cell, "accuracy": "", "error": str(exc)}


def load_default_grid() -> dict:
    grid = importlib.resources.files("fer_forge") / "manifests" / "default_sweep.manifest"
    with importlib.resources.as_file(grid) as path:
        return parse_manifest(str(path))


def cmd_sweep(args) -> int:
    manifest = parse_manifest(args.manifest) if args.manifest else load_default_grid()
    data_path = _require_file(_merge(args, manifest, "data"), "dataset")
    out = _merge(args, manifest, "out")
    if not out:
        raise UsageError("missing required output directory (--out)")
    seed = _merge(args, manifest, "seed", 42)
    strict = bool(_merge(args, manifest, "strict_epoch_eval", False))
    default_model = _merge(args, manifest, "model", "proposed_cnn")
    cells = [_parse_cell(raw, default_model) for raw in manifest.get("cell", [])]

    os.makedirs(out, exist_ok=True)
    jobs = []
    for i, cell in enumerate(cells):
        tag = f"cell_{i:02d}_{cell['model']}_{cell['optimizer']}_b{cell['batch']}_e{cell['epochs']}"
        jobs.append((cell, data_path, os.path.join(out, tag), seed, strict))

    workers = int(os.environ.get("FER_FORGE_THREADS", "1"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_sweep_cell, jobs))
    else:
        results = [_run_sweep_cell(job) for job in jobs]

    header = "model,optimizer,batch,epochs,lr,decay,accuracy,error"
    lines = [header]
    for r in results:
        lines.append(
            f"{r['model']},{r['optimizer']},{r['batch']},{r['epochs']},"
            f"{r['lr']},{r['decay']},{r['accuracy']},{r['error']}"
        )
    sweep_csv = "\n".join(lines) + "\n"
    with open(os.path.join(out, "sweep_results.csv"), "w", encoding="utf-8") as fh:
        fh.write(sweep_csv)
    print(sweep_csv, end="")

    models_seen = {r["model"] for r in results}
    if len(models_seen) > 1:
        best: dict[str, float] = {}
        for r in results:
            if r["accuracy"]:
                acc = float(r["accuracy"])
                best[r["model"]] = max(best.get(r["model"], 0.0), acc)
        rows = ["model,accuracy"] + [f"{m},{best[m]:.4f}" for m in sorted(best)]
        with open(os.path.join(out, "model_comparison.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    model_path = _require_file(args.model_file, "model file")
    data_path = _require_file(args.data, "dataset")
    net = M.load_model(model_path)
    _, test_ds = _load_split(data_path, args.seed if args.seed is not None else 42)
    if len(test_ds) == 0:
        raise UsageError("dataset has no test records")
    acc, probs, preds = T.evaluate(net, test_ds)
    matrix = T.confusion(preds, test_ds.labels)
    top2 = T.topk_accuracy(probs, test_ds.labels, k=2)
    print(f"test_accuracy={acc:.4f}")
    print(f"top2_accuracy={top2:.4f}")
    print(matrix.to_table())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "confusion.csv"), "w", encoding="utf-8") as fh:
            fh.write(matrix.to_csv())
        with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(f"accuracy,top2\n{acc:.6f},{top2:.6f}\n")
    return EXIT_OK


def _image_to_input(image: np.ndarray) -> np.ndarray:
    """Full-frame preprocessing: grayscale, 48x48 downscale, [0,1] range."""
    h, w = image.shape[:2]
    box = fd.Detection(0, 0, w, h, neighbors=0)
    return fd.preprocess_face(image, box)


def cmd_predict(args) -> int:
    model_path = _require_file(args.model_file, "model file")
    image_path = _require_file(args.image, "image")
    net = M.load_model(model_path)
    probs = net.predict(_image_to_input(fd.read_pnm(image_path)))
    ranked = sorted(zip(D.EMOTION_NAMES, probs), key=lambda kv: (-kv[1], kv[0]))
    for name, p in ranked:
        print(f"{name} {p:.6f}")
    print(f"top1={ranked[0][0]}")
    print(f"top2={ranked[1][0]}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cascade_path = _require_file(args.cascade, "cascade file")
    image_path = _require_file(args.image, "image")
    net = M.load_model(_require_file(args.model_file, "model file")) if args.model_file else None
    cascade = fd.load_cascade(cascade_path)
    image = fd.read_pnm(image_path)
    gray = fd.to_grayscale(image)
    detections = fd.detect(
        cascade, gray, scale_factor=args.scale_factor, min_neighbors=args.min_neighbors
    )
    header = "x,y,w,h,neighbors"
    if net is not None:
        header += "," + ",".join(D.EMOTION_NAMES)
    print(header)
    for det in detections:
        row = f"{det.x},{det.y},{det.w},{det.h},{det.neighbors}"
        if net is not None:
            probs = net.predict(fd.preprocess_face(image, det))
            row += "," + ",".join(f"{p:.6f}" for p in probs)
        print(row)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.model == "tree":
        raise UsageError("gradcheck applies to the neural architectures only")
    report = gradcheck_architecture(args.model, seed=args.seed if args.seed is not None else 42)
    for entry in report.entries:
        status = "pass" if entry.error < report.tolerance else "FAIL"
        print(f"{entry.label} rel_err={entry.error:.3e} {status}")
    worst = report.worst
    print(f"worst: {worst.label} ({worst.worst_part}) rel_err={worst.error:.3e} "
          f"tolerance={report.tolerance:g}")
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_histogram(args) -> int:
    data_path = _require_file(args.data, "dataset")
    records = D.parse_fer_csv(data_path)
    csv_text = D.histogram_csv(D.LabeledDataset.from_records(records))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
    print(csv_text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fer-forge",
        description="Facial emotion recognition pipeline: training, evaluation and detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, *, model=False, data=False, out=False, seed=True):
        if model:
            p.add_argument("--model", choices=MODEL_NAMES)
        if data:
            p.add_argument("--data", help="FER-2013 style CSV")
        if out:
            p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int)

    p_train = sub.add_parser("train", help="train one model and report test accuracy")
    add_common(p_train, model=True, data=True, out=True)
    p_train.add_argument("--manifest", help="key = value settings file; flags win")
    p_train.add_argument("--optimizer", choices=sorted(DEFAULT_LR))
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--decay", type=float)
    p_train.add_argument("--batch", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--strict-epoch-eval", dest="strict_epoch_eval",
                         action="store_const", const=True)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="run a grid of training cells")
    add_common(p_sweep, model=True, data=True, out=True)
    p_sweep.add_argument("--manifest", help="grid manifest with repeated cell = lines")
    p_sweep.add_argument("--strict-epoch-eval", dest="strict_epoch_eval",
                         action="store_const", const=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_eval = sub.add_parser("eval", help="evaluate a saved model on the test split")
    add_common(p_eval, data=True, out=True)
    p_eval.add_argument("--model-file", dest="model_file", help="saved .femo model")
    p_eval.set_defaults(func=cmd_eval)

    p_predict = sub.add_parser("predict", help="classify one PGM/PPM face image")
    p_predict.add_argument("--model-file", dest="model_file")
    p_predict.add_argument("--image")
    p_predict.set_defaults(func=cmd_predict)

    p_detect = sub.add_parser("detect", help="find faces; optionally classify each")
    p_detect.add_argument("--cascade")
    p_detect.add_argument("--image")
    p_detect.add_argument("--model-file", dest="model_file")
    p_detect.add_argument("--min-neighbors", dest="min_neighbors", type=int, default=3)
    p_detect.add_argument("--scale-factor", dest="scale_factor", type=float, default=1.1)
    p_detect.set_defaults(func=cmd_detect)

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of all layers")
    add_common(p_grad, model=True)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_hist = sub.add_parser("histogram", help="per-class sample counts as CSV")
    p_hist.add_argument("--data")
    p_hist.add_argument("--out")
    p_hist.set_defaults(func=cmd_histogram)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataFormatError, fd.PnmFormatError, fd.CascadeFormatError,
            M.ModelFileError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # computational failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def entry():
    sys.exit(main())
