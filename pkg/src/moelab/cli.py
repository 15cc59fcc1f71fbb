"""Command-line entry point: ``moelab <subcommand> --seed N [--config PATH] [--out DIR] ...``.

Every run writes ``manifest.json`` into ``--out``. Metrics files contain no
timings, so reruns with the same flags produce byte-identical metrics.

Exit status: 0 ok, 1 failed property, 2 bad configuration or input,
3 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class CliError(Exception):
    """Bad flags, config or input; reported with exit status 2."""


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: str | None
    seed: int
    out: str
    git_describe: str
    started: str
    finished: str | None = None
    argv: list[str] = dataclasses.field(default_factory=list)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_json_default)


def _yaml_overrides(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {path}")
    raw = yaml.safe_load(p.read_text()) or {}
    if not isinstance(raw, dict):
        raise CliError(f"{path}: expected a mapping of settings")
    return raw


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .datapipe import read_corpus
    from .model import ConfigError, load_config
    from .training import TrainConfig, TrainingDiverged, make_batch, smoke_corpus, train

    try:
        cfg = load_config(args.config or "tiny")
        if args.balancer:
            cfg = cfg.replace(balancer=args.balancer)
    except ConfigError as exc:
        raise CliError(str(exc)) from None
    tc = TrainConfig(steps=args.steps, lr=args.lr, embed_lr=args.lr, seed=args.seed)
    if args.corpus:
        docs = list(read_corpus(args.corpus))
        if any(int(d.tokens.max()) >= cfg.vocab_size for d in docs):
            raise CliError(f"{args.corpus}: token ids exceed vocab_size {cfg.vocab_size}")
    else:
        docs = smoke_corpus(args.tokens, cfg.vocab_size, args.seed)
    batch = make_batch(docs, cfg.seq_len)
    if batch.inputs.shape[0] == 0:
        raise CliError("corpus too small for one sequence")

    out = Path(args.out)
    metrics = (out / "metrics.jsonl").open("w")

    def log(rec):
        metrics.write(dumps(rec) + "\n")
        if rec["step"] % args.log_every == 0 or rec["step"] == 1:
            print(
                f"step {rec['step']:4d} loss {rec['loss']:.4f} max_vio {rec['max_vio_max']:.3f}"
                f" lse {rec['lse_mean_abs']:.3f}",
                file=sys.stderr,
            )

    try:
        res = train(cfg, tc, batch, on_step=log)
    except TrainingDiverged as exc:
        metrics.close()
        print(f"error: training diverged: {exc} (see {out / 'metrics.jsonl'})", file=sys.stderr)
        return EXIT_DIVERGED
    metrics.close()
    save_checkpoint(out / "checkpoint.bin", res.params, res.states, {"step": tc.steps, "config": cfg.name})
    first, last = res.history[0], res.history[-1]
    summary = {
        "loss_first": first["loss"],
        "loss_last": last["loss"],
        "max_vio_last": last["max_vio_max"],
        "lse_mean_abs_last": last["lse_mean_abs"],
        "steps": tc.steps,
        "balancer": cfg.balancer,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------- pack-bench


def cmd_pack_bench(args) -> int:
    from .datapipe import CorpusParams, PackingBenchConfig, packing_comparison, write_bench

    raw = _yaml_overrides(args.config)
    corpus_raw = dict(raw.pop("corpus", {}) or {})
    for key in ("length_mu", "length_sigma", "band_size", "zipf_exponent"):
        if getattr(args, key) is not None:
            corpus_raw[key] = getattr(args, key)
    if args.domain_weights:
        corpus_raw["domain_weights"] = tuple(float(x) for x in args.domain_weights.split(","))
    for key in ("steps", "seq_len", "microbatches", "seqs_per_microbatch", "rsdb_capacity"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    if args.packers:
        raw["packers"] = tuple(p.strip() for p in args.packers.split(",") if p.strip())
    try:
        corpus = CorpusParams(seed=args.seed, **corpus_raw)
        cfg = PackingBenchConfig(corpus=corpus, seed=args.seed, **raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid packing parameters: {exc}") from None
    unknown = set(cfg.packers) - {"sequential", "rsdb"}
    if unknown or not cfg.packers:
        raise CliError(f"unknown packers {sorted(unknown)}; choose from sequential, rsdb")
    for key in ("steps", "seq_len", "microbatches", "seqs_per_microbatch", "rsdb_capacity"):
        if getattr(cfg, key) < 1:
            raise CliError(f"{key} must be >= 1")
    reports, summary = packing_comparison(cfg)
    write_bench(reports, summary, args.out)
    print(dumps({k: v for k, v in summary.items() if k != "packers"}))
    return EXIT_OK


# ---------------------------------------------------------------- balance-sim


def cmd_balance_sim(args) -> int:
    from .moe import BalancerSimConfig, simulate_balancer

    raw = _yaml_overrides(args.config)
    for f in dataclasses.fields(BalancerSimConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "seed":
            raw[f.name] = v
    try:
        cfg = BalancerSimConfig(seed=args.seed, **raw)
    except TypeError as exc:
        raise CliError(f"invalid simulation parameters: {exc}") from None
    if cfg.balancer not in ("sign", "smebu", "none"):
        raise CliError(f"unknown balancer {cfg.balancer!r}")
    if not 1 <= cfg.top_k <= cfg.n_routed or cfg.steps < 1 or cfg.tokens_per_step < 1:
        raise CliError("need 1 <= top_k <= n_routed and positive steps / tokens")
    tr = simulate_balancer(cfg)
    out = Path(args.out)
    with (out / "trace.csv").open("w") as fh:
        fh.write("step,max_vio,mean_abs_bias_step," + ",".join(f"load_{i}" for i in range(cfg.n_routed)) + "\n")
        for t in range(cfg.steps):
            loads = ",".join(str(int(x)) for x in tr.loads[t])
            fh.write(f"{t + 1},{float(tr.max_vio[t])!r},{float(tr.bias_step[t])!r},{loads}\n")
    tail = slice(-min(500, cfg.steps), None)
    summary = {
        "balancer": cfg.balancer,
        "steps": cfg.steps,
        "max_vio_mean_tail": float(tr.max_vio[tail].mean()),
        "max_vio_max_tail": float(tr.max_vio[tail].max()),
        "mean_abs_bias_step_tail": float(tr.bias_step[tail].mean()),
        "final_bias": tr.bias[-1].tolist(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(dumps({k: v for k, v in summary.items() if k != "final_bias"}))
    return EXIT_OK


# ---------------------------------------------------------------- tokenize


def _read_inputs(paths: list[str]) -> list[bytes]:
    out = []
    for p in paths:
        try:
            out.append(Path(p).read_bytes())
        except OSError as exc:
            raise CliError(f"cannot read {p}: {exc.strerror}") from None
    return out


def _load_bpe(path: str):
    from .bpe import ModelFileError, load_model

    try:
        return load_model(path)
    except (OSError, ModelFileError) as exc:
        raise CliError(f"cannot load tokenizer model {path}: {exc}") from None


def cmd_tokenize(args) -> int:
    from . import bpe

    if args.action == "train":
        docs = [line for blob in _read_inputs(args.input) for line in blob.splitlines(keepends=True)]
        try:
            model = bpe.train_bpe(docs, args.vocab_size, tuple(args.special or ()))
        except bpe.BpeTrainingError as exc:
            raise CliError(str(exc)) from None
        path = Path(args.out) / "tokenizer.jsonl"
        bpe.save_model(model, path)
        result = {"vocab_size": model.vocab_size, "merges": len(model.merges), "model": str(path)}
        if args.verify_prefix_of:
            larger = _load_bpe(args.verify_prefix_of)
            if larger.vocab_size < model.vocab_size:
                raise CliError("--verify-prefix-of needs a model at least as large as the one trained")
            cut = larger.truncate(model.vocab_size)
            same_merges = cut.merges == model.merges
            same_ids = all(bpe.encode(cut, d) == bpe.encode(model, d) for d in docs)
            result["truncation_equivalent"] = same_merges and same_ids
            print(dumps(result))
            return EXIT_OK if result["truncation_equivalent"] else EXIT_FAILED
        print(dumps(result))
        return EXIT_OK

    model = _load_bpe(args.model)
    if args.action == "encode":
        (data,) = _read_inputs([args.input])
        ids = bpe.encode(model, data)
        text = " ".join(map(str, ids)) + "\n"
        _emit(args.output, text.encode())
        return EXIT_OK
    if args.action == "decode":
        (data,) = _read_inputs([args.input])
        try:
            ids = [int(x) for x in data.split()]
            raw = bpe.decode_bytes(model, ids)
        except ValueError as exc:
            raise CliError(f"bad token id list: {exc}") from None
        _emit(args.output, raw)
        return EXIT_OK
    if args.action == "stats":
        docs = _read_inputs(args.input)
        try:
            stats = bpe.efficiency_metrics(model, docs)
        except bpe.MetricError as exc:
            raise CliError(str(exc)) from None
        (Path(args.out) / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        print(dumps(stats))
        return EXIT_OK
    raise CliError(f"unknown tokenize action {args.action!r}")


def _emit(path: str | None, data: bytes) -> None:
    if path:
        Path(path).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


# ---------------------------------------------------------------- check


def cmd_check(args) -> int:
    from . import checks

    if args.list:
        for p in checks.CATALOGUE:
            print(f"{p.id}\t{p.description}")
        return EXIT_OK
    if args.checkpoint:
        from .checkpoint import CheckpointError, load_checkpoint

        try:
            params, states, _ = load_checkpoint(args.checkpoint)
        except (OSError, CheckpointError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAILED
        print(dumps({"checkpoint": args.checkpoint, "tensors": len(params), "router_states": len(states)}))
        return EXIT_OK
    known = set(checks.suites())
    bad = set(args.suite or ()) - known
    if bad:
        raise CliError(f"unknown suites {sorted(bad)}; available: {', '.join(sorted(known))}")
    ids = set(args.id or ())
    unknown_ids = ids - {p.id for p in checks.CATALOGUE}
    if unknown_ids:
        raise CliError(f"unknown property ids {sorted(unknown_ids)}")

    def show(rec):
        mark = "PASS" if rec["passed"] else "FAIL"
        print(f"{mark} {rec['id']} value={rec['value']:.6g} ({rec['seconds']:.1f}s)", flush=True)

    report = checks.run_checks(set(args.suite or ()), ids, on_result=show)
    (Path(args.out) / "check_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n"
    )
    if not report["passed"]:
        print("failed: " + " ".join(report["failed"]), file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (or preset name for train)")
    common.add_argument("--seed", type=int, required=True, help="random seed (mandatory)")
    common.add_argument("--out", default=None, help="output directory (default: runs/<subcommand>)")

    parser = argparse.ArgumentParser(prog="moelab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", parents=[common], help="smoke-train a preset on a small corpus")
    p.add_argument("--corpus", help="JSONL corpus ({'tokens': [...], 'domain': d} per line)")
    p.add_argument("--tokens", type=int, default=1000, help="synthetic corpus size when --corpus is absent")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--balancer", choices=("sign", "smebu", "none"))
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pack-bench", parents=[common], help="compare sequential packing and RSDB")
    p.add_argument("--packers", help="comma list of sequential,rsdb")
    p.add_argument("--steps", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--microbatches", type=int)
    p.add_argument("--seqs-per-microbatch", type=int)
    p.add_argument("--rsdb-capacity", type=int)
    p.add_argument("--length-mu", type=float)
    p.add_argument("--length-sigma", type=float)
    p.add_argument("--band-size", type=int)
    p.add_argument("--zipf-exponent", type=float)
    p.add_argument("--domain-weights", help="comma list, e.g. 0.8,0.2")
    p.set_defaults(func=cmd_pack_bench)

    p = sub.add_parser("balance-sim", parents=[common], help="simulate bias balancing on a skewed stream")
    p.add_argument("--balancer", choices=("sign", "smebu", "none"))
    p.add_argument("--steps", type=int)
    p.add_argument("--n-routed", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--tokens-per-step", type=int)
    p.add_argument("--skew", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--kappa", type=float)
    p.add_argument("--beta", type=float)
    p.set_defaults(func=cmd_balance_sim)

    p = sub.add_parser("tokenize", parents=[common], help="train, apply and measure byte-level BPE")
    p.add_argument("action", choices=("train", "encode", "decode", "stats"))
    p.add_argument("--input", "--corpus", dest="input", nargs="+", help="input file(s); encode/decode take one")
    p.add_argument("--model", help="tokenizer model file (encode/decode/stats)")
    p.add_argument("--output", help="output file for encode/decode (default stdout)")
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--special", nargs="*", help="special tokens to reserve (train)")
    p.add_argument("--verify-prefix-of", help="larger model whose truncation must match (train)")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("check", parents=[common], help="run the property catalogue")
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.add_argument("--id", action="append", help="run only this property id (repeatable)")
    p.add_argument("--list", action="store_true", help="list properties and exit")
    p.add_argument("--checkpoint", help="verify that a checkpoint file loads")
    p.set_defaults(func=cmd_check)
    return parser


def _validate(args) -> None:
    if args.subcommand == "tokenize":
        if not args.input:
            raise CliError("tokenize needs --input")
        if args.action in ("encode", "decode"):
            if len(args.input) != 1:
                raise CliError(f"tokenize {args.action} takes exactly one --input")
            args.input = args.input[0]
        if args.action != "train" and not args.model:
            raise CliError(f"tokenize {args.action} needs --model")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.out is None:
        args.out = str(Path("runs") / args.subcommand)
    manifest = RunManifest(args.subcommand, args.config, args.seed, args.out, git_describe(), _now(), argv=argv)
    out = Path(args.out)
    try:
        _validate(args)
        out.mkdir(parents=True, exist_ok=True)
        status = args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    if out.is_dir():
        manifest.finished = _now()
        rec = dataclasses.asdict(manifest)
        rec["exit_status"] = status
        (out / "manifest.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
