"""Config-driven end-to-end runs: rasterize, caption, two training
stages, and evaluation, with per-stage idempotence.

The config is a single versioned JSON document. Validation collects every
violation instead of stopping at the first, and unknown keys are errors
so typos cannot silently fall back to defaults. Reports written here
exclude wall-clock fields, keeping reruns byte-comparable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .captions import build_qa_corpus, load_qa_jsonl, save_qa_jsonl
from .errors import ConfigError
from .model import Model, ModelConfig
from .qa_eval import eval_run, save_log
from .raster import Viewport, read_ppm, render_scene, write_ppm
from .scenes import load_corpus, load_point_cloud
from .training import TrainConfig, load_model, train_stage
from .vocab import build_vocab

CONFIG_VERSION = 1

_MODEL_FIELDS = {
    "d": int, "d_bev": int, "patch": int, "enc_layers": int,
    "enc_heads": int, "dec_layers": int, "dec_heads": int,
    "max_seq": int, "lora_rank": int, "lora_alpha": (int, float),
    "image_size": int, "train_embeddings": bool,
}
_TRAIN_FIELDS = {
    "epochs": int, "batch_size": int, "max_lr": (int, float),
    "min_lr": (int, float), "warmup_ratio": (int, float),
    "weight_decay": (int, float), "max_steps": int, "fidelity": str,
    "checkpoint_every": int,
}
_INT_MINIMUMS = {
    "model.lora_rank": 1, "model.d": 2, "model.d_bev": 2, "model.patch": 1,
    "model.enc_layers": 0, "model.dec_layers": 1, "model.enc_heads": 1,
    "model.dec_heads": 1, "model.max_seq": 8, "model.image_size": 1,
}


@dataclass
class PipelineConfig:
    seed: int
    scenes: Path
    out: Path
    viewport: Viewport
    size: int
    line_width: int
    model: dict
    stage1: dict
    stage2: dict
    captions: dict = field(default_factory=dict)
    eval_opts: dict = field(default_factory=dict)

    def model_config(self):
        return ModelConfig(**self.model)


def _check_keys(doc, allowed, where, violations):
    for key in doc:
        if key not in allowed:
            violations.append(f"{where}{key}: unknown key")


def _typed(doc, key, types, default, where, violations):
    if key not in doc:
        return default
    v = doc[key]
    if isinstance(v, bool) and types is not bool and bool not in (
            types if isinstance(types, tuple) else (types,)):
        violations.append(f"{where}{key} must be {types}")
        return default
    if not isinstance(v, types):
        tname = types.__name__ if isinstance(types, type) else "number"
        violations.append(f"{where}{key} must be {tname}")
        return default
    return v


def validate_config(data, base_dir=None) -> PipelineConfig:
    """Parse and fully validate config bytes/str; raises ConfigError
    carrying every violation found."""
    violations = []
    try:
        doc = json.loads(data if isinstance(data, str) else data.decode("utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError([f"config is not valid JSON: {e.msg} "
                           f"(line {e.lineno}, column {e.colno})"]) from None
    if not isinstance(doc, dict):
        raise ConfigError(["config top level must be an object"])

    _check_keys(doc, {"version", "seed", "paths", "viewport", "raster",
                      "captions", "model", "train", "eval"}, "", violations)
    version = doc.get("version")
    if version != CONFIG_VERSION:
        violations.append(f"version must be {CONFIG_VERSION}, got {version!r}")
    seed = _typed(doc, "seed", int, 0, "", violations)

    paths = doc.get("paths")
    scenes = out = None
    if not isinstance(paths, dict):
        violations.append("paths must be an object with scenes and out")
    else:
        _check_keys(paths, {"scenes", "out"}, "paths.", violations)
        for key in ("scenes", "out"):
            if not isinstance(paths.get(key), str):
                violations.append(f"paths.{key} is required and must be a string")
        if isinstance(paths.get("scenes"), str):
            scenes = Path(paths["scenes"])
            if base_dir is not None and not scenes.is_absolute():
                scenes = Path(base_dir) / scenes
            if not scenes.is_dir():
                violations.append(f"paths.scenes does not exist: {scenes}")
        if isinstance(paths.get("out"), str):
            out = Path(paths["out"])
            if base_dir is not None and not out.is_absolute():
                out = Path(base_dir) / out

    vp_doc = doc.get("viewport", {})
    viewport = Viewport()
    if not isinstance(vp_doc, dict):
        violations.append("viewport must be an object")
    else:
        _check_keys(vp_doc, {"x_range", "y_range", "pixels_per_meter"},
                    "viewport.", violations)
        try:
            viewport = Viewport(
                x_range=tuple(vp_doc.get("x_range", (-25.0, 25.0))),
                y_range=tuple(vp_doc.get("y_range", (0.0, 100.0))),
                pixels_per_meter=vp_doc.get("pixels_per_meter", 8.96))
        except Exception as e:
            violations.append(f"viewport invalid: {e}")

    raster_doc = doc.get("raster", {})
    size, line_width = 448, 2
    if not isinstance(raster_doc, dict):
        violations.append("raster must be an object")
    else:
        _check_keys(raster_doc, {"size", "line_width"}, "raster.", violations)
        size = _typed(raster_doc, "size", int, 448, "raster.", violations)
        line_width = _typed(raster_doc, "line_width", int, 2, "raster.", violations)
        if size <= 0:
            violations.append("raster.size must be positive")

    model_doc = doc.get("model", {})
    model = {}
    if not isinstance(model_doc, dict):
        violations.append("model must be an object")
    else:
        _check_keys(model_doc, set(_MODEL_FIELDS), "model.", violations)
        for key, types in _MODEL_FIELDS.items():
            if key in model_doc:
                v = _typed(model_doc, key, types, None, "model.", violations)
                if v is not None:
                    model[key] = v
        for path, minimum in _INT_MINIMUMS.items():
            key = path.split(".", 1)[1]
            if key in model and model[key] < minimum:
                violations.append(f"{path} must be >= {minimum}")

    train_doc = doc.get("train", {})
    stages = {"stage1": {}, "stage2": {}}
    if not isinstance(train_doc, dict):
        violations.append("train must be an object")
    else:
        _check_keys(train_doc, {"stage1", "stage2"}, "train.", violations)
        for name in ("stage1", "stage2"):
            sub = train_doc.get(name, {})
            if not isinstance(sub, dict):
                violations.append(f"train.{name} must be an object")
                continue
            _check_keys(sub, set(_TRAIN_FIELDS), f"train.{name}.", violations)
            for key, types in _TRAIN_FIELDS.items():
                if key in sub:
                    v = _typed(sub, key, types, None, f"train.{name}.", violations)
                    if v is not None:
                        stages[name][key] = v
            if stages[name].get("epochs", 1) <= 0:
                violations.append(f"train.{name}.epochs must be positive")
            if stages[name].get("fidelity", "toy") not in ("toy", "paper"):
                violations.append(f"train.{name}.fidelity must be toy or paper")

    captions_doc = doc.get("captions", {})
    if not isinstance(captions_doc, dict):
        violations.append("captions must be an object")
        captions_doc = {}
    else:
        _check_keys(captions_doc, {"fix_grammar", "include_describe",
                                   "with_annotation"}, "captions.", violations)

    eval_doc = doc.get("eval", {})
    if not isinstance(eval_doc, dict):
        violations.append("eval must be an object")
        eval_doc = {}
    else:
        _check_keys(eval_doc, {"include_annotation", "max_new"}, "eval.", violations)

    if not violations and model:
        try:
            ModelConfig(**model)
        except Exception as e:
            violations.append(f"model: {e}")

    if violations:
        raise ConfigError(violations)
    return PipelineConfig(seed=seed, scenes=scenes, out=out,
                          viewport=viewport, size=size, line_width=line_width,
                          model=model, stage1=stages["stage1"],
                          stage2=stages["stage2"], captions=captions_doc,
                          eval_opts=eval_doc)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _load_cloud(corpus_root, scene):
    if scene.point_cloud_ref is None:
        return []
    return load_point_cloud(Path(corpus_root) / scene.point_cloud_ref)


def rasterize_corpus(cfg: PipelineConfig, corpus, log, force=False):
    img_dir = cfg.out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    written = skipped = 0
    for s in corpus.frames:
        path = img_dir / f"{s.frame_id}.ppm"
        if path.is_file() and not force:
            skipped += 1
            continue
        img = render_scene(s, _load_cloud(cfg.scenes, s), cfg.viewport,
                           size=cfg.size, line_width=cfg.line_width)
        write_ppm(path, img)
        written += 1
    log(stage="rasterize", written=written, skipped=skipped)
    return img_dir


def caption_corpus(cfg: PipelineConfig, corpus, log, force=False):
    outs = {
        "qa_stage1_train.jsonl": (corpus.train, "map"),
        "qa_stage2_train.jsonl": (corpus.train, "visibility"),
        "qa_test.jsonl": (corpus.test, "all"),
    }
    opts = cfg.captions
    paths = {}
    for name, (records, stage) in outs.items():
        path = cfg.out / name
        paths[stage if stage != "all" else "test"] = path
        if path.is_file() and not force:
            log(stage="caption", file=name, skipped=True)
            continue
        samples = build_qa_corpus(
            records, stage=stage,
            include_describe=opts.get("include_describe", False),
            with_annotation=opts.get("with_annotation", True),
            fix_grammar=opts.get("fix_grammar", False))
        save_qa_jsonl(path, samples)
        log(stage="caption", file=name, samples=len(samples))
    return paths


def corpus_vocab(corpus, cfg: PipelineConfig):
    """Vocabulary over every text the pipeline can see, train and test."""
    samples = build_qa_corpus(
        corpus.frames, stage="all", include_describe=True,
        with_annotation=True,
        fix_grammar=cfg.captions.get("fix_grammar", False))
    texts = []
    for q in samples:
        texts.extend((q.question, q.annotation, q.gold))
    return build_vocab(texts)


def load_images(img_dir, frame_ids):
    return {fid: read_ppm(Path(img_dir) / f"{fid}.ppm").pixels
            for fid in frame_ids}


def _train_cfg(doc, stage, seed):
    return TrainConfig(stage=stage, seed=seed, **doc)


def _strip_report(report):
    doc = report.to_dict()
    doc.pop("wall_time", None)
    if doc.get("checkpoint_path"):
        doc["checkpoint_path"] = Path(doc["checkpoint_path"]).name
    return doc


def run_pipeline(cfg: PipelineConfig, log, force=False):
    """Execute rasterize -> caption -> stage 1 -> stage 2 -> eval.
    Returns a dict of artifact paths."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(cfg.scenes)
    img_dir = rasterize_corpus(cfg, corpus, log, force=force)
    qa_paths = caption_corpus(cfg, corpus, log, force=force)

    model_cfg = cfg.model_config()
    vocab = corpus_vocab(corpus, cfg)
    # head width pinned to the closed template lexicon
    if model_cfg.vocab_size != len(vocab):
        model_cfg = ModelConfig(**{**model_cfg.to_dict(),
                                   "vocab_size": len(vocab)})

    stage1_path = cfg.out / "stage1.bllm"
    stage2_path = cfg.out / "stage2.bllm"
    train_ids = [s.frame_id for s in corpus.train]
    test_ids = [s.frame_id for s in corpus.test]

    if stage1_path.is_file() and not force:
        log(stage="train1", skipped=True)
    else:
        model = Model.build(model_cfg, seed=cfg.seed)
        samples = load_qa_jsonl(qa_paths["map"])
        images = load_images(img_dir, train_ids)
        report = train_stage(model, samples, images, vocab,
                             _train_cfg(cfg.stage1, 1, cfg.seed),
                             out_path=stage1_path)
        (cfg.out / "stage1_report.json").write_text(
            json.dumps(_strip_report(report), indent=1, sort_keys=True) + "\n")
        log(stage="train1", steps=report.steps,
            final_loss=report.loss_trace[-1] if report.loss_trace else None)

    if stage2_path.is_file() and not force:
        log(stage="train2", skipped=True)
    else:
        model, vocab1, stages_done, _ = load_model(stage1_path)
        samples = load_qa_jsonl(qa_paths["visibility"])
        images = load_images(img_dir, train_ids)
        report = train_stage(model, samples, images, vocab1,
                             _train_cfg(cfg.stage2, 2, cfg.seed),
                             out_path=stage2_path, stages_done=stages_done)
        (cfg.out / "stage2_report.json").write_text(
            json.dumps(_strip_report(report), indent=1, sort_keys=True) + "\n")
        log(stage="train2", steps=report.steps,
            final_loss=report.loss_trace[-1] if report.loss_trace else None)

    report_path = cfg.out / "eval_report.json"
    log_path = cfg.out / "eval_log.jsonl"
    if report_path.is_file() and not force:
        log(stage="eval", skipped=True)
    else:
        model, vocab2, _, _ = load_model(stage2_path)
        samples = load_qa_jsonl(qa_paths["test"])
        images = load_images(img_dir, test_ids)
        metrics, vis, records = eval_run(
            model, samples, images, vocab2,
            include_annotation=cfg.eval_opts.get("include_annotation", False),
            max_new=cfg.eval_opts.get("max_new", 32))
        save_log(log_path, records)
        doc = {}
        if metrics is not None:
            doc["metrics"] = metrics.to_dict()
        if vis is not None:
            doc["visibility"] = vis.to_dict()
        report_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        log(stage="eval", records=len(records))
    return {"images": img_dir, "stage1": stage1_path, "stage2": stage2_path,
            "report": report_path, "log": log_path}
