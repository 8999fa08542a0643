"""Command-line entry point: ``expansionnet <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 check failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field

from .data import SceneSpec, generate_dataset, load_dataset_dir, load_features, write_dataset_dir
from .errors import ConfigurationError, ContractError, DimensionError, FormatError, LengthError
from .gradcheck import model_gradient_check
from .metrics import build_idf
from .model import Captioner, ModelConfig, sidecar_path
from .training import (
    TrainConfig,
    TrainState,
    default_scst_config,
    evaluate,
    fine_tune_epoch,
    generate_captions,
    ref_words,
    train_scst,
    train_xe,
)
from .vocab import Vocabulary, build_vocab

logger = logging.getLogger("expansionnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-4
ABLATION_HEADER = ["encoder", "decoder", "n_e_enc", "n_e_dec", "cider_d", "bleu4"]


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration ------------------------------------------------------------


@dataclass
class AblationConfig:
    samples: int = 600
    data_seed: int = 0
    beam: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    xe: TrainConfig = field(default_factory=TrainConfig)
    scst: TrainConfig = field(default_factory=default_scst_config)
    ablate: AblationConfig = field(default_factory=AblationConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("run config must be a JSON object")
        unknown = sorted(set(doc) - {"model", "xe", "scst", "ablate"})
        if unknown:
            raise ConfigurationError(f"unknown config sections: {unknown}")
        scst = dict(dataclasses.asdict(default_scst_config()), **doc.get("scst", {}))
        return cls(
            model=ModelConfig.from_dict(doc.get("model", {})),
            xe=TrainConfig.from_dict(doc.get("xe", {})),
            scst=TrainConfig.from_dict(scst),
            ablate=_strict(AblationConfig, doc.get("ablate", {})),
        )

    def to_dict(self) -> dict:
        return {k: dataclasses.asdict(getattr(self, k)) for k in ("model", "xe", "scst", "ablate")}


def _strict(cls, doc: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {unknown}")
    return cls(**doc)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path: str | None, overrides=(), seed: int | None = None, base: dict | None = None) -> RunConfig:
    """Defaults, then ``base``, then the JSON file, then ``section.key=value`` overrides."""
    doc: dict = {k: dict(v) for k, v in (base or {}).items()}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError("run config must be a JSON object")
        for section, values in loaded.items():
            if isinstance(values, dict) and isinstance(doc.get(section), dict):
                doc[section].update(values)
            else:
                doc[section] = values
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigurationError(f"override must look like section.key=value, got {item!r}")
        doc.setdefault(section, {})
        if not isinstance(doc[section], dict):
            raise ConfigurationError(f"config section {section!r} must be an object")
        doc[section][name] = _parse_value(value)
    if seed is not None:
        for section in ("xe", "scst"):
            doc.setdefault(section, {})["seed"] = seed
        doc.setdefault("model", {})["init_seed"] = seed
    return RunConfig.from_dict(doc)


def _fit_to_data(model_cfg: ModelConfig, vocab: Vocabulary, d_feature: int) -> ModelConfig:
    return dataclasses.replace(model_cfg, vocab_size=len(vocab), d_feature=d_feature)


def _load_data(path: str):
    splits, vocab = load_dataset_dir(path)
    for name in ("train", "val"):
        if not splits.get(name):
            raise ContractError(f"data directory {path} has no {name} split")
    return splits, vocab


def _checkpoint_vocab(ckpt: str, fallback: Vocabulary | None = None) -> Vocabulary:
    with open(sidecar_path(ckpt), encoding="utf-8") as fh:
        meta = json.load(fh).get("meta", {})
    if "vocab" in meta:
        return Vocabulary.from_json(meta["vocab"])
    if fallback is None:
        raise ConfigurationError(f"checkpoint {ckpt} carries no vocabulary; pass --vocab")
    return fallback


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    match = re.fullmatch(r"(\d+)\.\.(\d+)", args.objects)
    if not match:
        raise ConfigurationError(f"--objects must look like MIN..MAX, got {args.objects!r}")
    lo, hi = int(match.group(1)), int(match.group(2))
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise ConfigurationError(f"output directory {args.out} is not empty (use --force to overwrite)")
    spec = SceneSpec(min_objects=lo, max_objects=hi, noise=args.noise)
    splits = generate_dataset(args.samples, args.seed, spec)
    vocab = write_dataset_dir(args.out, splits, min_freq=args.min_freq)
    for name, samples in splits.items():
        print(f"{name}: {len(samples)}")
    print(f"vocab: {len(vocab)}")
    return EXIT_OK


def _paths(out: str, log: str | None):
    return (log or f"{out}.metrics.jsonl"), f"{out}.last"


def cmd_train_xe(args) -> int:
    cfg = load_run_config(args.config, args.set, args.seed)
    splits, vocab = _load_data(args.data)
    log_path, last_path = _paths(args.out, args.log)
    if args.resume:
        state = TrainState.load(args.resume, cfg.xe)
        if state.stage != "xe":
            raise ConfigurationError(f"{args.resume} is a {state.stage} checkpoint, not a cross-entropy one")
    else:
        model_cfg = _fit_to_data(cfg.model, vocab, splits["train"][0].features.shape[1])
        state = TrainState.fresh(Captioner(model_cfg), cfg.xe)
    state.meta["vocab"] = vocab.to_json()
    state = train_xe(state, splits["train"], splits["val"], vocab, cfg.xe, log_path, args.out, last_path=last_path)
    if args.fine_tune:
        best = TrainState.load(args.out, cfg.xe)
        fine_tune_epoch(best, splits["train"], splits["val"], vocab, cfg.xe, log_path, args.out)
    print(f"best validation loss {state.best:.6f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_train_scst(args) -> int:
    cfg = load_run_config(args.config, args.set, args.seed)
    if not args.resume:
        raise ConfigurationError("train-scst needs --resume with a cross-entropy checkpoint")
    splits, vocab = _load_data(args.data)
    log_path, last_path = _paths(args.out, args.log)
    state = TrainState.load(args.resume, cfg.scst)
    state.meta["vocab"] = vocab.to_json()
    stats = build_idf(ref_words(splits["train"]))
    state = train_scst(
        state, splits["train"], splits["val"], vocab, cfg.scst, stats, log_path, args.out, last_path=last_path
    )
    print(f"best validation CIDEr-D {state.best:.2f}; checkpoint {args.out}")
    if args.fine_tune:
        logger.info("--fine-tune applies to cross-entropy training only; ignored")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.beam < 1:
        raise ConfigurationError(f"beam width must be at least 1, got {args.beam}")
    splits, data_vocab = load_dataset_dir(args.data)
    if args.split not in splits:
        raise FileNotFoundError(f"split {args.split!r} not found in {args.data}")
    model = Captioner.load(args.ckpt)
    vocab = _checkpoint_vocab(args.ckpt, data_vocab)
    metrics = evaluate(model, splits[args.split], vocab, beam=args.beam)
    print(f"split {args.split} ({len(splits[args.split])} scenes), beam {args.beam}")
    for key in ("cider_d", "bleu1", "bleu4", "loss", "accuracy"):
        print(f"{key}: {metrics[key]:.4f}")
    return EXIT_OK


def cmd_caption(args) -> int:
    if args.beam < 1:
        raise ConfigurationError(f"beam width must be at least 1, got {args.beam}")
    model = Captioner.load(args.ckpt)
    vocab = _checkpoint_vocab(args.ckpt, Vocabulary.load(args.vocab) if args.vocab else None)
    samples = load_features(args.features)
    for scene, tokens in zip(samples, generate_captions(model, samples, args.beam)):
        print(f"{scene.id}\t{vocab.decode(tokens)}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = load_run_config(args.config, args.set, base={"model": ModelConfig.tiny().to_dict()}).model
    results = model_gradient_check(cfg, seed=args.seed)
    failed = [r for r in results if not r.ok(GRAD_TOLERANCE)]
    for r in results:
        print(f"{'ok  ' if r.ok(GRAD_TOLERANCE) else 'FAIL'} {r.name:40s} max rel err {r.max_rel_error:.2e}")
    print(f"{len(results) - len(failed)}/{len(results)} parameters within {GRAD_TOLERANCE:g}")
    if failed:
        raise CheckFailed(f"{len(failed)} parameter gradients disagree with finite differences")
    return EXIT_OK


_CELL = re.compile(r"(Base|Static|Dynamic)(\d*)")


def _layer(token: str, where: str) -> tuple[str, int, dict]:
    """Map one grid token (Base, StaticN, DynamicN) to model overrides."""
    match = _CELL.fullmatch(token)
    if not match or (match.group(1) == "Base") != (match.group(2) == ""):
        raise ConfigurationError(f"bad ablation cell {token!r}: expected Base, StaticN or DynamicN")
    kind, n = match.group(1), int(match.group(2) or 0)
    if kind == "Base":
        return token, 0, {f"{where}_layer_kind": "attention"}
    if n < 1:
        raise ConfigurationError(f"expansion coefficient must be positive in {token!r}")
    if where == "dec":
        if kind == "Static":
            raise ConfigurationError("a decoder cannot use static expansion (it is not causal)")
        return token, n, {"dec_layer_kind": "expansion", "dec_mode": "dynamic_causal", "dec_n_e": n}
    mode = "static" if kind == "Static" else "dynamic_bidirectional"
    return token, n, {"enc_layer_kind": "expansion", "enc_mode": mode, "enc_n_e": n}


def parse_grid(spec: str) -> list[tuple[str, str, int, int, dict]]:
    """Grid cells as (encoder, decoder, n_e_enc, n_e_dec, model overrides).

    ``ENC/DEC`` names both sides. Shorthand: ``Base`` is Base/Base, ``StaticN``
    is StaticN/Base, and ``DynamicN`` is Static64/DynamicN (decoder ablation
    over the strongest static encoder).
    """
    cells = []
    for raw in spec.split(","):
        token = raw.strip()
        if not token:
            continue
        if "/" in token:
            enc, _, dec = token.partition("/")
        elif token == "Base" or token.startswith("Static"):
            enc, dec = token, "Base"
        else:
            enc, dec = "Static64", token
        enc_name, n_enc, enc_over = _layer(enc.strip(), "enc")
        dec_name, n_dec, dec_over = _layer(dec.strip(), "dec")
        cells.append((enc_name, dec_name, n_enc, n_dec, {**enc_over, **dec_over}))
    if not cells:
        raise ConfigurationError("empty ablation grid")
    return cells


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.set, args.seed)
    cells = parse_grid(args.grid)
    if args.data:
        splits, vocab = _load_data(args.data)
    else:
        splits = generate_dataset(cfg.ablate.samples, cfg.ablate.data_seed)
        vocab = build_vocab(r for s in splits["train"] for r in s.refs)
    eval_split = splits.get("test") or splits["val"]
    d_feature = splits["train"][0].features.shape[1]
    rows = []
    for enc, dec, n_enc, n_dec, overrides in cells:
        model_cfg = _fit_to_data(dataclasses.replace(cfg.model, **overrides), vocab, d_feature)
        state = TrainState.fresh(Captioner(model_cfg), cfg.xe)
        logger.info("ablation cell %s/%s", enc, dec)
        state = train_xe(state, splits["train"], splits["val"], vocab, cfg.xe, eval_captions=False)
        metrics = evaluate(state.model, eval_split, vocab, beam=cfg.ablate.beam)
        rows.append([enc, dec, n_enc, n_dec, f"{metrics['cider_d']:.2f}", f"{metrics['bleu4']:.4f}"])
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    ranked = sorted(rows, key=lambda r: -float(r[4]))
    logger.info("CIDEr-D ordering: %s", " > ".join(f"{r[0]}/{r[1]}" for r in ranked))
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="expansionnet", description="Expansion-mechanism image captioning pipeline.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print results, no progress logs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene/caption dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=2500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objects", default="1..3", help="objects per scene, MIN..MAX")
    p.add_argument("--noise", type=float, default=SceneSpec.noise)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (
        ("train-xe", cmd_train_xe, "cross-entropy training"),
        ("train-scst", cmd_train_scst, "self-critical CIDEr-D optimisation"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="best-validation checkpoint path")
        p.add_argument("--resume", help="checkpoint to continue from")
        p.add_argument("--fine-tune", action="store_true", help="one extra small-lr epoch after training")
        p.add_argument("--log", help="metrics JSON-lines path (default OUT.metrics.jsonl)")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="caption metrics on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--beam", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("caption", help="caption every image of a feature container")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--beam", type=int, default=2)
    p.add_argument("--vocab", help="vocab.json, if the checkpoint does not carry one")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="train each encoder/decoder cell and tabulate scores")
    p.add_argument("--config")
    p.add_argument("--grid", default="Base,Static64,Dynamic1,Dynamic16")
    p.add_argument("--data", help="dataset directory (default: generate per the config)")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, FormatError, ContractError, DimensionError, LengthError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
