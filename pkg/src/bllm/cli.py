"""Command-line entry points.

Subcommands: rasterize, caption, train, generate, eval-qa, eval-det,
lanefit, lanescore, pipeline, fixtures. Machine-readable progress goes to
stderr as JSON lines; human summaries go to stdout. Exit codes: 0
success, 2 config/validation, 3 data, 4 training, 5 evaluation.
"""

import os

# Thread cap must land before numpy initializes its BLAS thread pool.
_threads = os.environ.get("BLLM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from pathlib import Path

from .errors import (BllmError, ConfigError, ContractError, DataError,
                     EvalError, GradientError, ParseError, ShapeError,
                     TrainAbort, ValidationError)

EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_EVAL = 2, 3, 4, 5

_EXIT_BY_TYPE = (
    (ConfigError, EXIT_CONFIG),
    ((TrainAbort, GradientError), EXIT_TRAIN),
    (EvalError, EXIT_EVAL),
    ((ParseError, ValidationError, DataError, ShapeError, ContractError,
      BllmError), EXIT_DATA),
)


def log_event(**fields):
    print(json.dumps(fields, sort_keys=True), file=sys.stderr)


def _exit_code(exc, context=None):
    if context == "train" and isinstance(exc, ContractError):
        return EXIT_TRAIN
    for types, code in _EXIT_BY_TYPE:
        if isinstance(exc, types):
            return code
    return 1


def _fail(exc, context=None):
    code = _exit_code(exc, context)
    detail = {"error": type(exc).__name__, "message": str(exc), "exit": code}
    if isinstance(exc, ConfigError):
        detail["violations"] = exc.violations
    log_event(**detail)
    print(f"error: {exc}", file=sys.stdout)
    return code


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_rasterize(args):
    from .pipeline import PipelineConfig, rasterize_corpus
    from .raster import Viewport, read_ppm, write_png
    from .scenes import load_corpus

    vp = Viewport(x_range=(args.viewport[0], args.viewport[1]),
                  y_range=(args.viewport[2], args.viewport[3]),
                  pixels_per_meter=args.ppm)
    cfg = PipelineConfig(seed=0, scenes=Path(args.scenes), out=Path(args.out),
                         viewport=vp, size=args.size,
                         line_width=args.line_width, model={},
                         stage1={}, stage2={})
    corpus = load_corpus(cfg.scenes)
    img_dir = rasterize_corpus(cfg, corpus, log_event, force=args.force)
    if args.png:
        for s in corpus.frames:
            ppm = img_dir / f"{s.frame_id}.ppm"
            write_png(img_dir / f"{s.frame_id}.png", read_ppm(ppm))
    print(f"rasterized {len(corpus.frames)} frames into {img_dir}")
    return 0


def cmd_caption(args):
    from .captions import build_qa_corpus, save_qa_jsonl
    from .scenes import load_corpus

    corpus = load_corpus(Path(args.scenes))
    records = {"train": corpus.train, "test": corpus.test,
               "all": corpus.frames}[args.split]
    samples = build_qa_corpus(records, stage=args.stage,
                              include_describe=args.include_describe,
                              with_annotation=not args.no_annotation,
                              fix_grammar=args.fix_grammar)
    save_qa_jsonl(args.out, samples)
    log_event(stage="caption", samples=len(samples), out=str(args.out))
    print(f"wrote {len(samples)} QA samples to {args.out}")
    return 0


def _train_config_from_args(args):
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        unknown = set(doc) - {"epochs", "batch_size", "max_lr", "min_lr",
                              "warmup_ratio", "weight_decay", "max_steps",
                              "fidelity", "checkpoint_every", "seed"}
        if unknown:
            raise ConfigError([f"train config: unknown key {k!r}"
                               for k in sorted(unknown)])
    for key, value in (("epochs", args.epochs), ("batch_size", args.batch_size),
                       ("max_lr", args.lr), ("max_steps", args.max_steps),
                       ("fidelity", args.fidelity), ("seed", args.seed)):
        if value is not None:
            doc[key] = value
    from .training import TrainConfig

    seed = doc.pop("seed", 0)
    return TrainConfig(stage=args.stage, seed=seed, **doc)


def cmd_train(args):
    from .captions import load_qa_jsonl
    from .model import Model, ModelConfig
    from .pipeline import corpus_vocab, load_images
    from .scenes import load_corpus
    from .training import load_model, train_stage

    try:
        tcfg = _train_config_from_args(args)
        samples = load_qa_jsonl(args.qa)
        frame_ids = sorted({s.frame_id for s in samples})
        images = load_images(args.images, frame_ids)
        if args.resume:
            model, vocab, stages_done, _ = load_model(args.resume)
        else:
            if args.stage == 2:
                raise ContractError("stage 2 requires --resume with a "
                                    "stage-1 checkpoint")
            if not args.scenes:
                raise ConfigError(
                    ["--scenes is required when training a fresh model"])
            corpus = load_corpus(Path(args.scenes))
            from .pipeline import PipelineConfig
            from .raster import Viewport

            pcfg = PipelineConfig(seed=tcfg.seed, scenes=Path(args.scenes),
                                  out=Path("."), viewport=Viewport(),
                                  size=448, line_width=2, model={},
                                  stage1={}, stage2={})
            vocab = corpus_vocab(corpus, pcfg)
            mdoc = json.loads(Path(args.model_config).read_text()) \
                if args.model_config else {}
            mdoc.setdefault("vocab_size", len(vocab))
            if mdoc["vocab_size"] < len(vocab):
                mdoc["vocab_size"] = len(vocab)
            if args.train_embeddings:
                mdoc["train_embeddings"] = True
            model = Model.build(ModelConfig(**mdoc), seed=tcfg.seed)
            stages_done = ()
        report = train_stage(model, samples, images, vocab, tcfg,
                             out_path=Path(args.out), stages_done=stages_done)
    except ContractError as e:
        return _fail(e, context="train")
    doc = report.to_dict()
    log_event(stage=f"train{args.stage}", steps=report.steps,
              frozen_unchanged=doc["frozen_unchanged"])
    if args.report:
        doc.pop("wall_time", None)
        Path(args.report).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    last = report.loss_trace[-1] if report.loss_trace else float("nan")
    acc = report.epoch_token_acc[-1] if report.epoch_token_acc else float("nan")
    print(f"stage {args.stage}: {report.steps} steps, final loss {last:.4f}, "
          f"token accuracy {acc:.3f}, checkpoint {args.out}")
    return 0


def cmd_generate(args):
    from .raster import read_ppm
    from .training import load_model

    model, vocab, _, _ = load_model(args.ckpt)
    img = read_ppm(args.image)
    ann_ids = vocab.encode(args.annotation) if args.annotation else []
    ids = model.generate(model.visual_grouped(img.pixels), ann_ids,
                         vocab.encode(args.question), max_new=args.max_new)
    print(vocab.decode(ids))
    return 0


def cmd_eval_qa(args):
    from .captions import load_qa_jsonl
    from .pipeline import load_images
    from .qa_eval import eval_run, save_log
    from .training import load_model

    model, vocab, _, _ = load_model(args.ckpt)
    samples = load_qa_jsonl(args.qa)
    frame_ids = sorted({s.frame_id for s in samples})
    images = load_images(args.images, frame_ids)
    metrics, vis, records = eval_run(model, samples, images, vocab,
                                     include_annotation=args.include_annotation,
                                     max_new=args.max_new)
    doc = {}
    if metrics is not None:
        doc["metrics"] = metrics.to_dict()
        print(metrics.table())
    if vis is not None:
        doc["visibility"] = vis.to_dict()
        print(vis.table())
    Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    if args.log:
        save_log(args.log, records)
    log_event(stage="eval-qa", records=len(records), out=str(args.out))
    return 0


def cmd_eval_det(args):
    from .det_eval import det_report, load_boxes

    preds = load_boxes(args.pred, with_scores=True)
    gts = load_boxes(args.gt, with_scores=False)
    report = det_report(preds, gts, iou_thresh=args.iou_thresh,
                        score_thresh=args.score_thresh)
    doc = report.to_dict()
    Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"P {doc['precision']:.2f}  R {doc['recall']:.2f}  "
          f"F1 {doc['f1']:.2f}  mAP@0.5 {doc['map50']:.2f}")
    log_event(stage="eval-det", **{k: doc[k] for k in
                                   ("tp", "fp", "fn", "map50")})
    return 0


def cmd_lanefit(args):
    from .lanefit import fit_mask, read_pgm, save_curves

    mask = read_pgm(args.mask)
    curves = fit_mask(mask, degree=args.degree)
    save_curves(args.out, curves)
    log_event(stage="lanefit", lanes=len(curves), out=str(args.out))
    print(f"fit {len(curves)} lanes at degree {args.degree} into {args.out}")
    return 0


def cmd_lanescore(args):
    from .lanefit import lane_accuracy, load_curves, load_gt_lanes

    curves = load_curves(args.pred)
    gt = load_gt_lanes(args.gt)
    acc = lane_accuracy(curves, gt, tau=args.tau)
    log_event(stage="lanescore", accuracy=acc)
    print(f"lane accuracy: {acc:.1f}% (tau {args.tau:g} px)")
    return 0


def cmd_pipeline(args):
    from .pipeline import run_pipeline, validate_config

    path = Path(args.config)
    if not path.is_file():
        raise ConfigError([f"config file does not exist: {path}"])
    cfg = validate_config(path.read_bytes(), base_dir=path.parent)
    artifacts = run_pipeline(cfg, log_event, force=args.force)
    print("pipeline complete:")
    for name, p in artifacts.items():
        print(f"  {name}: {p}")
    return 0


def cmd_fixtures(args):
    from .fixtures import write_corpus

    train, test = write_corpus(args.out, n_train=args.train, n_test=args.test,
                               seed=args.seed, clouds=not args.no_clouds)
    log_event(stage="fixtures", train=len(train), test=len(test),
              out=str(args.out))
    print(f"wrote {len(train)} train + {len(test)} test scenes to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="bllm",
        description="BEV road-scene pipeline: rasterization, captions, "
                    "instruction tuning, QA and detection metrics, lane fitting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rasterize", help="render scene corpus to BEV images")
    p.add_argument("--scenes", required=True, help="scene corpus directory")
    p.add_argument("--out", required=True, help="output directory for images")
    p.add_argument("--viewport", nargs=4, type=float,
                   default=(-25.0, 25.0, 0.0, 100.0),
                   metavar=("XMIN", "XMAX", "YMIN", "YMAX"),
                   help="world window in meters")
    p.add_argument("--ppm", type=float, default=8.96,
                   help="pixels per meter before resize")
    p.add_argument("--size", type=int, default=448,
                   help="final square image size in pixels")
    p.add_argument("--line-width", type=int, default=2,
                   help="annotation line width in pixels")
    p.add_argument("--png", action="store_true",
                   help="also write PNG copies for viewing")
    p.add_argument("--force", action="store_true",
                   help="re-render even if outputs exist")
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("caption", help="emit captions and QA pairs as JSONL")
    p.add_argument("--scenes", required=True, help="scene corpus directory")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--stage", choices=("map", "visibility", "all"),
                   default="map", help="which QA families to emit")
    p.add_argument("--split", choices=("train", "test", "all"), default="all",
                   help="which corpus split to caption")
    p.add_argument("--fix-grammar", action="store_true",
                   help="pluralize lane counts instead of template-verbatim text")
    p.add_argument("--include-describe", action="store_true",
                   help="also emit full-caption describe samples")
    p.add_argument("--no-annotation", action="store_true",
                   help="leave the annotation field empty")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("train", help="run one instruction-tuning stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True,
                   help="training stage")
    p.add_argument("--scenes", help="scene corpus directory (stage 1 vocab)")
    p.add_argument("--qa", required=True, help="QA JSONL corpus")
    p.add_argument("--images", required=True,
                   help="directory of rendered PPM frames")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--model-config", help="model config JSON (fresh models)")
    p.add_argument("--report", help="write the training report JSON here")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--batch-size", type=int, help="override batch size")
    p.add_argument("--lr", type=float, help="override peak learning rate")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--fidelity", choices=("toy", "paper"),
                   help="hyperparameter profile")
    p.add_argument("--train-embeddings", action="store_true",
                   help="also train patch/position embeddings")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="answer one question about one image")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="PPM image path")
    p.add_argument("--question", required=True, help="question text")
    p.add_argument("--annotation", default="", help="optional annotation text")
    p.add_argument("--max-new", type=int, default=32,
                   help="generation length cap")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval-qa", help="score a model on a QA corpus")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--qa", required=True, help="QA JSONL corpus")
    p.add_argument("--images", required=True,
                   help="directory of rendered PPM frames")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--log", help="write the per-record JSONL log here")
    p.add_argument("--include-annotation", action="store_true",
                   help="feed annotation text to the model")
    p.add_argument("--max-new", type=int, default=32,
                   help="generation length cap")
    p.set_defaults(func=cmd_eval_qa)

    p = sub.add_parser("eval-det", help="detection metrics from box dumps")
    p.add_argument("--pred", required=True, help="prediction JSONL")
    p.add_argument("--gt", required=True, help="ground-truth JSONL")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--iou-thresh", type=float, default=0.5,
                   help="IoU threshold for a true positive")
    p.add_argument("--score-thresh", type=float,
                   help="drop predictions below this score")
    p.set_defaults(func=cmd_eval_det)

    p = sub.add_parser("lanefit", help="fit lane polynomials from a mask")
    p.add_argument("--mask", required=True, help="instance mask PGM")
    p.add_argument("--degree", type=int, default=2, help="polynomial degree")
    p.add_argument("--out", required=True, help="curves JSON path")
    p.set_defaults(func=cmd_lanefit)

    p = sub.add_parser("lanescore", help="point-wise lane accuracy")
    p.add_argument("--pred", required=True, help="fitted curves JSON")
    p.add_argument("--gt", required=True, help="ground-truth lanes JSON")
    p.add_argument("--tau", type=float, default=20.0,
                   help="horizontal tolerance in pixels")
    p.set_defaults(func=cmd_lanescore)

    p = sub.add_parser("pipeline", help="run the full end-to-end pipeline")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--force", action="store_true",
                   help="recompute stages whose outputs already exist")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("fixtures", help="generate a synthetic scene corpus")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--train", type=int, default=8,
                   help="number of training scenes")
    p.add_argument("--test", type=int, default=4, help="number of test scenes")
    p.add_argument("--seed", type=int, default=7, help="generator seed")
    p.add_argument("--no-clouds", action="store_true",
                   help="skip point cloud files")
    p.set_defaults(func=cmd_fixtures)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BllmError as e:
        return _fail(e)
    except OSError as e:
        return _fail(DataError(str(e)))


if __name__ == "__main__":
    sys.exit(main())
