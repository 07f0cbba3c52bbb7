"""Command-line surface: synth | zeroshot | train | eval | sweep | ablate |
gradcheck.

Reports are append-only line-delimited JSON. Exit codes: 0 success, 2 usage,
3 validation/codec, 4 numeric failure, 5 I/O. A key=value config file can
supply any flag's value; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import dataio, model as model_mod, trainer
from .caches import build_textual_cache, build_visual_cache
from .conditionnet import init_condition_net
from .errors import (AtcError, CodecError, ConfigError, ContractError,
                     EvaluationError, ShapeError, UsageError, ValidationError)
from .model import AtcModel, loss_and_grads, batch_loss, trainables
from .numerics import Rng, grad_check


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise UsageError(f"expected on/off, got {value!r}")


def _parse_activation(value: str) -> tuple[str, float]:
    if value == "linear":
        return "linear", 1.0
    if value.startswith("tip"):
        gamma = 1.0
        if ":" in value:
            gamma = float(value.split(":", 1)[1])
        return "tip", gamma
    raise UsageError(f"unknown activation {value!r}")


def _read_config_file(path) -> dict[str, str]:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Fill unset options from the config file, then from defaults."""
    cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, default in defaults.items():
        if getattr(args, key, None) is None:
            if key in cfg:
                raw = cfg[key]
                caster = type(default) if default is not None else str
                if caster is bool:
                    setattr(args, key, _parse_bool(raw))
                else:
                    setattr(args, key, caster(raw))
            else:
                setattr(args, key, default)
    return args


def _emit(record: dict, report_path) -> None:
    line = json.dumps(record, sort_keys=True)
    if report_path:
        with open(report_path, "a") as f:
            f.write(line + "\n")
    print(line)


def _eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("ATC_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_queries(m: AtcModel, queries: np.ndarray,
                     labels: np.ndarray) -> dict:
    """Accuracy over a query set; chunked across ATC_THREADS workers (the
    model is read-only during evaluation)."""
    threads = _eval_threads()
    if threads == 1 or queries.shape[0] < 2 * threads:
        preds = model_mod.predict_batch(m, queries)
    else:
        chunks = np.array_split(np.arange(queries.shape[0]), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(
                lambda sel: model_mod.predict_batch(m, queries[sel]), chunks))
        preds = np.concatenate(parts)
    correct = int(np.sum(preds == labels))
    total = int(labels.size)
    return {"accuracy": correct / total, "correct": correct, "total": total}


def _subset(es: dataio.EmbeddingSet, idx: np.ndarray) -> dataio.EmbeddingSet:
    return dataio.EmbeddingSet(es.features[idx], es.labels[idx],
                               es.class_names, es.role)


def _load_pair(text_path, support_path):
    text = dataio.read_embeddings(text_path)
    support = dataio.read_embeddings(support_path)
    if text.dim != support.dim:
        raise ValidationError(
            f"dim mismatch: text {text.dim} vs support {support.dim}")
    return text, support


def _build_model(text, episode, *, visual_mode, renorm, activation, gamma,
                 alpha, beta, scale, adaptive_text, chunk_count, hidden_size,
                 seed):
    textual = build_textual_cache(text, renormalize=renorm)
    visual = build_visual_cache(episode, text.num_classes, mode=visual_mode,
                                renormalize=renorm)
    net = init_condition_net(text.dim, chunk_count, hidden_size,
                             Rng(seed).child(1000))
    return AtcModel(textual, visual, net, alpha=alpha, beta=beta,
                    logit_scale=scale, activation=activation, tip_gamma=gamma,
                    adaptive_text=adaptive_text)


_TRAIN_DEFAULTS = dict(
    shots=16, views=1, seed=0, epochs=20, lr=1e-3, batch_size=0,
    weight_decay=0.0, alpha=1.0, beta=1.0, scale=100.0, renorm="on",
    activation="linear", visual_mode="biases", shuffle="on",
    leave_self_out="off", chunk_count=8, hidden_size=64,
)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--shots", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--scale", type=float)
    p.add_argument("--renorm", choices=["on", "off"])
    p.add_argument("--activation")
    p.add_argument("--visual-mode", dest="visual_mode",
                   choices=["fixed", "linear", "biases"])
    p.add_argument("--shuffle", choices=["on", "off"])
    p.add_argument("--leave-self-out", dest="leave_self_out",
                   choices=["on", "off"])
    p.add_argument("--chunk-count", dest="chunk_count", type=int)
    p.add_argument("--hidden-size", dest="hidden_size", type=int)


def _train_once(args, adaptive_text: bool):
    text, support = _load_pair(args.text, args.support)
    spec = dataio.EpisodeSpec(args.shots, args.seed, args.views)
    idx = dataio.sample_episode(support.labels, spec)
    episode = _subset(support, idx)
    activation, gamma = _parse_activation(args.activation)
    renorm = _parse_bool(args.renorm)
    m = _build_model(
        text, episode, visual_mode=args.visual_mode, renorm=renorm,
        activation=activation, gamma=gamma, alpha=args.alpha, beta=args.beta,
        scale=args.scale, adaptive_text=adaptive_text,
        chunk_count=args.chunk_count, hidden_size=args.hidden_size,
        seed=args.seed)
    cfg = trainer.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.lr, weight_decay=args.weight_decay,
        seed=args.seed, shuffle=_parse_bool(args.shuffle),
        leave_self_out=_parse_bool(args.leave_self_out))
    ckpt = trainer.train(m, episode.features, episode.labels, cfg)
    ckpt.config.update({
        "episode_shots": args.shots,
        "episode_seed": args.seed,
        "episode_views": args.views,
    })
    return m, ckpt, text


def _rebuild_from_checkpoint(ckpt: trainer.Checkpoint, text_path, support_path,
                             alpha=None, beta=None) -> AtcModel:
    text, support = _load_pair(text_path, support_path)
    hyper = ckpt.hyper
    spec = dataio.EpisodeSpec(int(ckpt.config["episode_shots"]),
                              int(ckpt.config["episode_seed"]),
                              int(ckpt.config.get("episode_views", 1)))
    idx = dataio.sample_episode(support.labels, spec)
    episode = _subset(support, idx)
    if text.dim != hyper["dim"]:
        raise ValidationError(
            f"checkpoint dim {hyper['dim']} != embedding dim {text.dim}")
    m = _build_model(
        text, episode, visual_mode=hyper["visual_mode"],
        renorm=hyper["renorm_text"], activation=hyper["activation"],
        gamma=hyper["tip_gamma"],
        alpha=hyper["alpha"] if alpha is None else alpha,
        beta=hyper["beta"] if beta is None else beta,
        scale=hyper["logit_scale"], adaptive_text=hyper["adaptive_text"],
        chunk_count=hyper["chunk_count"], hidden_size=hyper["hidden_size"],
        seed=int(ckpt.config["episode_seed"]))
    m.visual.renormalize = hyper["renorm_visual"]
    trainer.apply_checkpoint(m, ckpt)
    return m


def cmd_synth(args) -> int:
    cfg = dataio.SynthConfig(args.classes, args.dim, args.shots, args.queries,
                             args.sigma, args.text_noise, args.seed)
    sets = dataio.synth_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    paths = {}
    for role, es in sets.items():
        path = os.path.join(args.out, f"{role}.ate")
        dataio.write_embeddings(es, path)
        paths[role] = path
    _emit({"command": "synth", "config": asdict(cfg), "paths": paths,
           "seed": args.seed}, args.report)
    return 0


def cmd_zeroshot(args) -> int:
    start = time.time()
    text = dataio.read_embeddings(args.text)
    query = dataio.read_embeddings(args.query)
    if text.dim != query.dim:
        raise ValidationError(f"dim mismatch: text {text.dim} vs query {query.dim}")
    logits = model_mod.zero_shot_logits(text.features, query.features)
    preds = np.argmax(logits, axis=1)
    correct = int(np.sum(preds == query.labels))
    total = int(query.labels.size)
    _emit({"command": "zeroshot", "text": args.text, "query": args.query,
           "accuracy": correct / total, "correct": correct, "total": total,
           "wall_clock": time.time() - start}, args.report)
    return 0


def cmd_train(args) -> int:
    start = time.time()
    m, ckpt, _ = _train_once(args, adaptive_text=True)
    trainer.save_checkpoint(ckpt, args.ckpt)
    record = {"command": "train", "ckpt": args.ckpt, "seed": args.seed,
              "config": ckpt.config, "epochs": ckpt.metrics,
              "wall_clock": time.time() - start}
    if args.query:
        query = dataio.read_embeddings(args.query)
        record["eval"] = evaluate_queries(m, query.features, query.labels)
    _emit(record, args.report)
    return 0


def cmd_eval(args) -> int:
    start = time.time()
    ckpt = trainer.load_checkpoint(args.ckpt)
    m = _rebuild_from_checkpoint(ckpt, args.text, args.support,
                                 alpha=args.alpha, beta=args.beta)
    for qpath in args.query:
        query = dataio.read_embeddings(qpath)
        if query.dim != m.dim:
            raise ValidationError(
                f"dim mismatch: query {query.dim} vs model {m.dim}")
        result = evaluate_queries(m, query.features, query.labels)
        _emit({"command": "eval", "ckpt": args.ckpt, "query": qpath,
               "alpha": m.alpha, "beta": m.beta, **result,
               "wall_clock": time.time() - start}, args.report)
    return 0


def cmd_sweep(args) -> int:
    if not args.values:
        raise UsageError("sweep needs at least one value")
    ckpt = trainer.load_checkpoint(args.ckpt)
    query = dataio.read_embeddings(args.query)
    results = []
    for value in args.values:
        alpha = value if args.param == "alpha" else 1.0
        beta = value if args.param == "beta" else 1.0
        m = _rebuild_from_checkpoint(ckpt, args.text, args.support,
                                     alpha=alpha, beta=beta)
        results.append((value, evaluate_queries(m, query.features,
                                                query.labels)))
    best = max(results, key=lambda r: r[1]["accuracy"])[0]
    for value, result in results:
        _emit({"command": "sweep", "param": args.param, "value": value,
               "alpha": value if args.param == "alpha" else 1.0,
               "beta": value if args.param == "beta" else 1.0,
               "best": value == best, **result}, args.report)
    return 0


_ABLATE_MODES = ("fixed-text", "adaptive-text", "fixed-visual",
                 "linear-visual", "bias-visual")


def cmd_ablate(args) -> int:
    start = time.time()
    adaptive_text = True
    for mode in args.mode:
        if mode not in _ABLATE_MODES:
            raise UsageError(f"unknown ablation mode {mode!r}")
        if mode == "fixed-text":
            adaptive_text = False
        elif mode == "adaptive-text":
            adaptive_text = True
        elif mode == "fixed-visual":
            args.visual_mode = "fixed"
        elif mode == "linear-visual":
            args.visual_mode = "linear"
        elif mode == "bias-visual":
            args.visual_mode = "biases"
    m, ckpt, _ = _train_once(args, adaptive_text=adaptive_text)
    if args.ckpt:
        trainer.save_checkpoint(ckpt, args.ckpt)
    record = {"command": "ablate", "modes": args.mode, "seed": args.seed,
              "adaptive_text": adaptive_text, "visual_mode": args.visual_mode,
              "epochs": ckpt.metrics, "wall_clock": time.time() - start}
    if args.query:
        query = dataio.read_embeddings(args.query)
        record["eval"] = evaluate_queries(m, query.features, query.labels)
    _emit(record, args.report)
    return 0


def run_full_gradcheck(seed: int, renorm: bool, activation: str = "linear",
                       gamma: float = 1.0, eps: float = 1e-4,
                       tol: float = 1e-4):
    """Finite-difference check of the whole trainable surface on a small
    synthetic episode."""
    cfg = dataio.SynthConfig(num_classes=3, dim=16, shots=2,
                             queries_per_class=2, sigma=0.3, seed=seed)
    sets = dataio.synth_dataset(cfg)
    textual = build_textual_cache(sets["text"], renormalize=renorm)
    visual = build_visual_cache(sets["support"], cfg.num_classes,
                                mode="biases", renormalize=renorm)
    net = init_condition_net(cfg.dim, chunk_count=4, hidden_size=6,
                             rng=Rng(seed).child(1))
    # nonzero starting point so every gate parameter sees gradient
    rng = Rng(seed).child(2)
    np.copyto(net.W_out, 0.05 * rng.normal(net.W_out.shape))
    np.copyto(visual.biases, 0.05 * rng.normal(visual.biases.shape))
    m = AtcModel(textual, visual, net, logit_scale=5.0, activation=activation,
                 tip_gamma=gamma)
    queries = sets["query"].features
    targets = sets["query"].labels

    params = {k: v.copy() for k, v in trainables(m).items()}
    _, analytic = loss_and_grads(m, queries, targets)

    def fn(p):
        model_mod.set_trainables(m, p)
        return batch_loss(m, queries, targets)

    try:
        report = grad_check(fn, params, analytic, eps=eps, tol=tol)
    finally:
        model_mod.set_trainables(m, params)
    return report


def cmd_gradcheck(args) -> int:
    renorm = _parse_bool(args.renorm)
    activation, gamma = _parse_activation(args.activation)
    report = run_full_gradcheck(args.seed, renorm, activation, gamma)
    print(report.summary())
    _emit({"command": "gradcheck", "seed": args.seed, "renorm": args.renorm,
           "activation": args.activation, "passed": report.passed,
           "worst": {g.name: g.max_rel_err for g in report.groups.values()}},
          args.report)
    return 0 if report.passed else 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atc",
        description="Two-branch few-shot head over precomputed embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--report")
        p.add_argument("--config")

    p = sub.add_parser("synth", help="generate synthetic embedding files")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--text-noise", dest="text_noise", type=float)
    p.add_argument("--seed", type=int)
    common(p)
    p.set_defaults(func=cmd_synth, defaults=dict(
        classes=10, dim=64, shots=16, queries=50, sigma=0.35,
        text_noise=0.15, seed=7))

    p = sub.add_parser("zeroshot", help="cosine argmax baseline")
    p.add_argument("--text", required=True)
    p.add_argument("--query", required=True)
    common(p)
    p.set_defaults(func=cmd_zeroshot, defaults={})

    p = sub.add_parser("train", help="train the two-branch head")
    p.add_argument("--text", required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--query")
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=cmd_train, defaults=dict(_TRAIN_DEFAULTS))

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--query", action="append", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    common(p)
    p.set_defaults(func=cmd_eval, defaults=dict(alpha=None, beta=None))

    p = sub.add_parser("sweep", help="sweep alpha or beta, other pinned at 1")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--param", choices=["alpha", "beta"], required=True)
    p.add_argument("--values", type=lambda s: [float(v) for v in s.split(",")],
                   required=True)
    common(p)
    p.set_defaults(func=cmd_sweep, defaults={})

    p = sub.add_parser("ablate", help="train and evaluate a cache variant")
    p.add_argument("--text", required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--query")
    p.add_argument("--ckpt")
    p.add_argument("--mode", action="append", required=True)
    _add_train_flags(p)
    common(p)
    p.set_defaults(func=cmd_ablate, defaults=dict(_TRAIN_DEFAULTS))

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int)
    p.add_argument("--renorm", choices=["on", "off"])
    p.add_argument("--activation")
    common(p)
    p.set_defaults(func=cmd_gradcheck, defaults=dict(
        seed=0, renorm="on", activation="linear"))

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        args = _resolve(args, args.defaults)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (CodecError, ValidationError, ConfigError, ShapeError,
            ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except EvaluationError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except AtcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 5


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
