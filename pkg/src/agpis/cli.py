"""Command-line entry point.

Exit status: 0 success, 1 input error (bad flags, files, values), 2 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from . import model as M
from . import ruleworld as rw
from . import stage1 as s1
from . import vocab

log = logging.getLogger("agpis")

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def read_config_file(path: str | None, base: M.MuiscConfig) -> M.MuiscConfig:
    """``key=value`` lines overriding ``base``; ``#`` starts a comment."""
    if path is None:
        return base
    items = dict(base.to_items())
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{n}: expected key=value")
        items[key.strip()] = value.strip()
    return M.MuiscConfig.from_items(items)


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# -- subcommands -------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    mixture = tuple(float(x) for x in args.mixture.split(","))
    ds = rw.generate_dataset(args.n, mixture, args.seed)
    manifest = io.write_dataset(ds, args.out)
    counts = {s: len(ds.split(s)) for s in io.SPLITS}
    _emit(json.dumps({"manifest": str(manifest), "records": len(ds.records), **counts}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    from . import training as T
    train = io.read_dataset(args.manifest, "train")
    if not train:
        raise ValueError(f"{args.manifest} has no training records")
    if args.model == "stage1":
        cfg = read_config_file(args.config, s1.STAGE1_MODEL_CONFIG)
        (pi, pl), (ni, nl) = s1.stage1_training_sets(train)
        epochs = args.epochs or 5
        primary, lp = s1.train_classifier(pi, pl, epochs=epochs, seed=args.seed, cfg=cfg)
        nc, ln = s1.train_classifier(ni, nl, epochs=epochs, seed=args.seed + 1, cfg=cfg)
        io.save_stage1(args.out, s1.Stage1Models(primary, nc))
        lines = ["epoch,primary_loss,nc_loss"] + [f"{i},{a!r},{b!r}" for i, (a, b) in enumerate(zip(lp, ln), 1)]
        curve = "\n".join(lines) + "\n"
    else:
        cfg = read_config_file(args.config, M.DESK_CONFIG)
        val = io.read_dataset(args.manifest, "val")
        res = T.train(cfg, train, epochs=args.epochs or 10, batch_size=args.batch_size, seed=args.seed,
                      val_records=val or None, max_steps=args.max_steps)
        io.save_model(args.out, res.model)
        curve = T.curve_csv(res.curve)
    if args.curve:
        Path(args.curve).write_text(curve)
    else:
        _emit(curve)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate
    model = io.load_model(args.checkpoint)
    test = io.read_dataset(args.manifest, args.split)
    report = evaluate(model, test, rw.category_subsets(test, args.seed))
    _emit(report.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import ablation_suite, format_table
    base = read_config_file(args.config, M.DESK_CONFIG)
    train = io.read_dataset(args.manifest, "train")
    test = io.read_dataset(args.manifest, "test")
    rows = ablation_suite(train, test, args.seed, base=base, epochs=args.epochs,
                          batch_size=args.batch_size, max_steps=args.max_steps)
    _emit(format_table(rows))
    return EXIT_OK


_WORKER: dict = {}


def _load_pipeline_models(stage1_path: str, muisc_path: str):
    key = (stage1_path, muisc_path)
    if key not in _WORKER:
        _WORKER.clear()
        _WORKER[key] = (io.load_stage1(stage1_path), io.load_model(muisc_path))
    return _WORKER[key]


def _product_inputs(image_dir: str, title: str | None) -> tuple[list[np.ndarray], list[int]]:
    d = Path(image_dir)
    if not d.is_dir():
        raise ValueError(f"{image_dir} is not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".ppm")
    if not files:
        raise ValueError(f"{image_dir} contains no .ppm images")
    if title is None:
        tfile = d / "title.txt"
        if not tfile.is_file():
            raise ValueError(f"no --title given and {tfile} does not exist")
        title = tfile.read_text()
    return [io.read_ppm(p) for p in files], vocab.tokenize(title)


def _run_one(job) -> str:
    from .pipeline import PipelineConfig, run_pipeline
    stage1_path, muisc_path, image_dir, title, threshold, seed = job
    s1m, model = _load_pipeline_models(stage1_path, muisc_path)
    images, title_ids = _product_inputs(image_dir, title)
    res = run_pipeline(images, title_ids, s1m, model, PipelineConfig(threshold=threshold, k_t=model.cfg.seq_len),
                       seed)
    return res.to_json()


def cmd_pipeline(args) -> int:
    from .pipeline import SUBMIT_THRESHOLD
    threshold = SUBMIT_THRESHOLD if args.threshold is None else args.threshold
    jobs = [(args.stage1, args.muisc, d, args.title, threshold, args.seed) for d in args.images]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            lines = list(pool.map(_run_one, jobs))  # map keeps input order
    else:
        lines = [_run_one(j) for j in jobs]
    for line in lines:
        _emit(line)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .checks import GRAD_TOL, grad_check_suite
    results = grad_check_suite(args.seed)
    worst = max(results.values())
    for name, err in results.items():
        _emit(f"{name:28s} {err:.3e} {'ok' if err < GRAD_TOL else 'FAIL'}")
    if worst >= GRAD_TOL:
        log.error("gradient check failed: max relative error %.3e", worst)
        return EXIT_INVARIANT
    return EXIT_OK


def paper_scale_forward(seed: int = 0) -> dict:
    """Build the full-size configuration and run one forward pass on random inputs."""
    from . import autograd as ag
    cfg = M.PAPER_CONFIG
    t0 = time.perf_counter()
    model = M.MuiscModel.create(cfg, seed)
    rng = np.random.default_rng(seed)
    images = rng.random((1, cfg.seq_len, cfg.image_size, cfg.image_size, 3))
    with ag.no_grad():
        out = M.forward(model, M.make_batch(images, [M.decoder_input([4, 5, 6], None, cfg)]))
    p = out.p_mcc
    assert p.shape == (1, cfg.num_classes) and np.isfinite(p).all()
    # timing goes to the log so standard output stays reproducible
    log.info("paper-scale forward pass took %.2f s", time.perf_counter() - t0)
    return {"config": "full-size", "parameters": model.num_parameters(), "class_logits": list(out.class_logits.shape),
            "lm_logits": list(out.lm_logits.shape), "p_t": float(p[0, 0])}


# -- parser ------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value file overriding the model configuration")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threshold", type=float, default=None, help="submission threshold on p_t (default 0.3)")

    p = _Parser(prog="agpis", description="Product image-sequence generation and review.")
    p.add_argument("--paper-scale", action="store_true",
                   help="build the full-size configuration, run one forward pass and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a rule-world dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--mixture", default=",".join(str(m) for m in rw.DEFAULT_MIXTURE))
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train stage-1 classifiers or MUIsC")
    t.add_argument("--manifest", required=True)
    t.add_argument("--model", choices=("stage1", "muisc"), required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--curve", help="write the loss curve CSV here instead of standard output")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a MUIsC checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=io.SPLITS, default="test")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="train and compare the five ablation settings")
    a.add_argument("--manifest", required=True)
    a.add_argument("--epochs", type=int, default=10)
    a.add_argument("--batch-size", type=int, default=16)
    a.add_argument("--max-steps", type=int, default=None)
    a.set_defaults(fn=cmd_ablate)

    q = sub.add_parser("pipeline", parents=[common], help="run both stages on candidate image folders")
    q.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    q.add_argument("--muisc", required=True, help="MUIsC checkpoint")
    q.add_argument("--images", nargs="+", required=True, help="one folder of .ppm candidates per product")
    q.add_argument("--title", help="title words (default: title.txt inside each folder)")
    q.add_argument("--jobs", type=int, default=1)
    q.set_defaults(fn=cmd_pipeline)

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every block")
    c.set_defaults(fn=cmd_grad_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.paper_scale:
            _emit(json.dumps(paper_scale_forward(getattr(args, "seed", 0)), sort_keys=True))
            return EXIT_OK
        if args.command is None:
            parser.error("a subcommand is required")
        return args.fn(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"agpis: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # anything else is a broken invariant
        print(f"agpis: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
