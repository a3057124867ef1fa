"""Command-line front end: ``densecap <command> [flags]``.

Every command writes a ``manifest.json`` (or ``<file>.manifest.json`` for
single-file outputs) recording its inputs, outputs, seeds and configs.
Exit codes: 0 success, 1 invalid data, 2 I/O failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import __version__
from .codec import PhaseCaptionList, Tokenizer, build_vocabulary, decode_sequence, encode_target_sequence
from .errors import FormatError, ValidationError
from .features import (
    FeatureCache,
    PrecomputedExtractor,
    StreamConfig,
    SyntheticExtractor,
    frame_key,
    subglobal_region,
)
from .geometry import PAD, SquareRegion, local_crop_region, resample_to_F
from .inference import predict_split
from .metrics import MetricReport, challenge_score, evaluate_run
from .model import CaptionModel, ModelConfig, load_checkpoint, save_checkpoint
from .scenario import ScenarioSet, caption_corpus, generate_synthetic_dataset, load_scenario_set, save_scenario_set
from .training import TrainConfig, fit, inference_window

log = logging.getLogger("densecap")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seeds: dict = field(default_factory=dict)
    config_paths: list[str] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__
    created: str = ""

    def write(self, path) -> None:
        self.created = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, path=path, line=exc.lineno) from exc


def _load_config(path) -> dict:
    if path is None:
        return {}
    cfg = _read_json(path)
    if not isinstance(cfg, dict) or set(cfg) - {"model", "train", "extractor"}:
        raise ValidationError(["config keys must be a subset of model, train, extractor"], context=str(path))
    return cfg


def _resolve_split(path, prefer=("valid.json", "train.json")) -> Path:
    """A split file, or the first of ``prefer`` present in a dataset directory."""
    p = Path(path)
    if p.is_dir():
        for name in prefer:
            if (p / name).exists():
                return p / name
        raise FileNotFoundError(f"{p} holds none of {', '.join(prefer)}")
    return p


def _file_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(args, man: RunManifest) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    phases = (args.min_phases, args.max_phases)
    train = generate_synthetic_dataset(
        args.seed, args.count, phases, split="train",
        missing_box_prob=args.missing_box_prob, overhead_frac=args.overhead_frac,
    )
    sets = [train]
    save_scenario_set(train, out / "train.json")
    man.outputs.append(str(out / "train.json"))
    if args.valid_count:
        valid = generate_synthetic_dataset(
            args.seed + 1, args.valid_count, phases, split="valid",
            missing_box_prob=args.missing_box_prob, id_offset=args.count,
        )
        save_scenario_set(valid, out / "valid.json")
        man.outputs.append(str(out / "valid.json"))
        sets.append(valid)
    build_vocabulary(caption_corpus(sets), args.time_tokens).save(out / "tokenizer.json")
    man.outputs.append(str(out / "tokenizer.json"))
    man.seeds = {"seed": args.seed}
    man.write(out / "manifest.json")


def _extractor_from(cfg: dict) -> SyntheticExtractor:
    return SyntheticExtractor(**cfg)


def cmd_features(args, man: RunManifest) -> None:
    """Cache every frame vector an inference pass over the split can request."""
    split = load_scenario_set(_resolve_split(args.data))
    cfg = _load_config(args.config)
    ext_cfg = {"d": cfg.get("model", {}).get("d", 64), **cfg.get("extractor", {})}
    ext = _extractor_from(ext_cfg)
    F = cfg.get("model", {}).get("F", 100)
    mid_fps = cfg.get("train", {}).get("mid_fps", 3.0)
    cache = FeatureCache()
    for s in split:
        win = inference_window(s)
        plan = resample_to_F(win.duration, s.fps, mid_fps, F)
        regions = [SquareRegion.full_frame(s.frame_size), subglobal_region(s)]
        for src in plan.source_indices:
            if src == PAD:
                continue
            for reg in regions:
                cache.put(frame_key(s.id, win.start_n + src, reg), ext.extract(s, win.start_n + src, reg))
        for frame, box in s.bbox_track:
            reg = local_crop_region(box, s.frame_size)
            cache.put(frame_key(s.id, frame, reg), ext.extract(s, frame, reg))
    out = Path(args.out)
    cache.save(out)
    man.outputs.append(str(out))
    man.write(_file_manifest(out))
    print(f"{len(cache)} vectors -> {out}")


def cmd_encode(args, man: RunManifest) -> None:
    tok = Tokenizer.load(args.tokenizer)
    items = _read_json(args.input)
    try:
        caps = PhaseCaptionList.from_list(items)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"caption entries need start, end and caption: {exc}", path=args.input) from None
    seq = encode_target_sequence(caps.captions(), caps.time_pairs(), tok, args.max_len)
    out = Path(args.out)
    _write_json(out, {"ids": list(seq.ids), "rendered": tok.render(seq.ids)})
    man.outputs.append(str(out))
    man.write(_file_manifest(out))


def cmd_decode(args, man: RunManifest) -> int:
    tok = Tokenizer.load(args.tokenizer)
    raw = _read_json(args.input)
    ids = raw["ids"] if isinstance(raw, dict) else raw
    if not isinstance(ids, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
        raise FormatError("expected a list of integer ids", path=args.input, field="ids")
    caps, warns = decode_sequence(ids, tok)
    out = Path(args.out)
    _write_json(out, caps.to_list())
    for w in warns:
        log.warning("decode: %s", w)
    man.outputs.append(str(out))
    man.write(_file_manifest(out))
    return EXIT_INVALID if warns and args.strict else EXIT_OK


def cmd_train(args, man: RunManifest) -> None:
    data = Path(args.data)
    cfg = _load_config(args.config)
    train_kw = dict(cfg.get("train", {}))
    for k in ("seed", "epochs", "max_steps"):
        if getattr(args, k) is not None:
            train_kw[k] = getattr(args, k)
    tcfg = TrainConfig(**train_kw)
    train = load_scenario_set(data / "train.json" if data.is_dir() else data)
    valid = load_scenario_set(data / "valid.json") if data.is_dir() and (data / "valid.json").exists() else None
    if data.is_dir() and (data / "tokenizer.json").exists():
        tok = Tokenizer.load(data / "tokenizer.json")
    else:
        tok = build_vocabulary(caption_corpus([train] + ([valid] if valid else [])))
    model_kw = dict(cfg.get("model", {}))
    if "streams" in model_kw:
        model_kw["streams"] = StreamConfig(**model_kw["streams"])
    mcfg = ModelConfig(vocab_size=tok.vocab_size, **model_kw)
    ext_cfg = {"d": mcfg.d, **cfg.get("extractor", {})}
    ext = _extractor_from(ext_cfg)

    torch.manual_seed(tcfg.seed)
    model = CaptionModel(mcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = fit(model, tok, ext, list(train), tcfg, valid=list(valid) if valid else ())
    extra = {"extractor": ext_cfg, "train": tcfg.to_dict()}
    save_checkpoint(model, out / "last.ckpt", tok, {**extra, "epoch": result.log.records[-1]["epoch"]})
    model.load_state_dict(result.best_state)
    save_checkpoint(model, out / "best.ckpt", tok, {**extra, "epoch": result.best_epoch})
    tok.save(out / "tokenizer.json")
    result.log.save(out / "trainlog.ndjson")
    eval_set = valid if valid else train
    preds = predict_split([model], tok, ext, list(eval_set), seed=tcfg.seed, mid_fps=tcfg.mid_fps)
    _write_json(out / "preds.json", preds)
    man.seeds = {"seed": tcfg.seed}
    man.outputs += [str(out / n) for n in ("best.ckpt", "last.ckpt", "tokenizer.json", "trainlog.ndjson", "preds.json")]
    man.write(out / "manifest.json")
    if result.best_score is not None:
        print(f"best epoch {result.best_epoch} score {result.best_score:.2f}")


def cmd_generate(args, man: RunManifest) -> None:
    paths = args.ensemble.split(",") if args.ensemble else [args.ckpt]
    loaded = [load_checkpoint(p) for p in paths]
    models = [m for m, _, _ in loaded]
    tok = loaded[0][1] if args.tokenizer is None else Tokenizer.load(args.tokenizer)
    if tok is None:
        raise ValidationError(["checkpoint carries no tokenizer; pass --tokenizer"])
    extra = loaded[0][2]
    if args.features:
        ext = PrecomputedExtractor(FeatureCache.load(args.features))
        man.inputs.append(args.features)
    else:
        ext = _extractor_from(extra.get("extractor", {"d": models[0].cfg.d}))
    split = load_scenario_set(_resolve_split(args.data))
    mid_fps = extra.get("train", {}).get("mid_fps", 3.0)
    preds = predict_split(models, tok, ext, list(split), seed=args.seed, strategy=args.strategy,
                          beam_width=args.beam, mid_fps=mid_fps)
    out = Path(args.out)
    _write_json(out, preds)
    man.inputs += paths
    man.seeds = {"seed": args.seed}
    man.outputs.append(str(out))
    man.write(_file_manifest(out))


def cmd_eval(args, man: RunManifest) -> None:
    preds = _read_json(args.pred)
    if not isinstance(preds, dict):
        raise FormatError("prediction file must map scenario ids to caption lists", path=args.pred)
    gt: ScenarioSet = load_scenario_set(_resolve_split(args.gt))
    rv, rp, score = evaluate_run(preds, gt)
    report = {"vehicle": rv.to_dict(with_phases=args.per_phase), "pedestrian": rp.to_dict(with_phases=args.per_phase),
              "score": score}
    if args.out:
        out = Path(args.out)
        _write_json(out, report)
        man.outputs.append(str(out))
        man.write(_file_manifest(out))
    else:
        json.dump(report, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")


def cmd_score(args, man: RunManifest) -> None:
    raw = _read_json(args.metrics)
    if not isinstance(raw, dict) or "vehicle" not in raw or "pedestrian" not in raw:
        raise ValidationError(["metrics JSON needs vehicle and pedestrian reports"], context=args.metrics)
    score = challenge_score(MetricReport.from_dict(raw["vehicle"]), MetricReport.from_dict(raw["pedestrian"]))
    print(f"{score:.2f}")


# ---------------------------------------------------------------------------
# Parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="densecap", description="Synthetic traffic dense-captioning toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--valid-count", type=int, default=0)
    g.add_argument("--min-phases", type=int, default=4)
    g.add_argument("--max-phases", type=int, default=5)
    g.add_argument("--missing-box-prob", type=float, default=0.25)
    g.add_argument("--overhead-frac", type=float, default=0.0)
    g.add_argument("--time-tokens", type=int, default=100)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("features", help="cache inference-window frame vectors")
    f.add_argument("--data", required=True, help="split file or dataset directory")
    f.add_argument("--config")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_features)

    for name, func, help_ in (("encode", cmd_encode, "caption file -> token ids"),
                              ("decode", cmd_decode, "token ids -> caption file")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--tokenizer", required=True)
        e.add_argument("--in", dest="input", required=True)
        e.add_argument("--out", required=True)
        if name == "encode":
            e.add_argument("--max-len", type=int, default=1024)
        else:
            e.add_argument("--strict", action="store_true", help="exit 1 when decoding emits warnings")
        e.set_defaults(func=func)

    t = sub.add_parser("train", help="fit a model and write checkpoints")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", help="caption a split")
    src = gen.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--ensemble", help="comma-separated checkpoint paths")
    gen.add_argument("--data", required=True)
    gen.add_argument("--tokenizer")
    gen.add_argument("--features", help="feature cache written by `features`")
    gen.add_argument("--strategy", choices=("greedy", "beam"), default="greedy")
    gen.add_argument("--beam", type=int, default=4)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True, help="split file or dataset directory")
    ev.add_argument("--out")
    ev.add_argument("--per-phase", action="store_true")
    ev.set_defaults(func=cmd_eval)

    sc = sub.add_parser("score", help="challenge score from a metrics JSON")
    sc.add_argument("--metrics", required=True)
    sc.set_defaults(func=cmd_score)
    return p


def _config_paths(args) -> list[str]:
    return [args.config] if getattr(args, "config", None) else []


def _input_paths(args) -> list[str]:
    keys = ("data", "input", "tokenizer", "pred", "gt", "metrics")
    return [str(getattr(args, k)) for k in keys if getattr(args, k, None)]


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("DCK_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    man = RunManifest(args.command, argv, config_paths=_config_paths(args), inputs=_input_paths(args))
    try:
        code = args.func(args, man)
    except (ValidationError, FormatError, LookupError, ValueError) as exc:
        print(f"densecap {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"densecap {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK if code is None else code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
