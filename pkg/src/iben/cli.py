"""Command-line surface for the headline-funniness pipeline.

Subcommands: preprocess, stats, pseudo-encode, train, evaluate, baseline,
gradcheck.  Exit codes are a stable scripting contract: 0 success,
1 validation or check failure, 2 I/O or format error.
"""

from __future__ import annotations

import argparse
import copy
import importlib.resources
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import autodiff as ad
from . import bertfuse, corpus, wordvec
from . import model as model_lib
from . import train as train_lib
from .autodiff import Parameter, Tensor
from .corpus import PAD_TOKEN, TokenSequence
from .errors import ConfigError, DataFormatError, IbenError, TrainingError

GRADCHECK_THRESHOLD = 1e-4


# ---------------------------------------------------------------------------
# run configuration

def runconfig_schema() -> dict:
    text = importlib.resources.files("iben").joinpath(
        "data/runconfig_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _fill_defaults(value: dict, node: dict) -> dict:
    """Populate missing keys from the schema's declared defaults."""
    out = dict(value)
    for key, sub in node.get("properties", {}).items():
        if key not in out and "default" in sub:
            out[key] = copy.deepcopy(sub["default"])
        if key in out and isinstance(out[key], dict) and "properties" in sub:
            out[key] = _fill_defaults(out[key], sub)
        if key in out and isinstance(out[key], list) and isinstance(sub.get("items"), dict):
            out[key] = [
                _fill_defaults(v, sub["items"]) if isinstance(v, dict) else v
                for v in out[key]
            ]
    return out


def _schema_errors(validator, document) -> str | None:
    errors = sorted(validator.iter_errors(document),
                    key=lambda e: list(e.absolute_path))
    if not errors:
        return None
    spots = []
    for e in errors[:5]:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        spots.append(f"{where}: {e.message}")
    return "; ".join(spots)


def validate_runconfig(raw) -> dict:
    """Schema-check a raw config and return it with defaults applied.

    The defaulted result is validated a second time, so the resolved echo
    written next to a checkpoint is guaranteed to be re-loadable.
    """
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    validator = jsonschema.Draft202012Validator(runconfig_schema())
    problem = _schema_errors(validator, raw)
    if problem:
        raise ConfigError(f"run config rejected: {problem}")
    resolved = _fill_defaults(raw, validator.schema)
    problem = _schema_errors(validator, resolved)
    if problem:
        raise ConfigError(f"resolved config failed re-validation: {problem}")

    use_bert = resolved["branches"] in ("bert", "both")
    use_emb = resolved["branches"] in ("emb", "both")
    if use_bert and not resolved["features"]:
        raise ConfigError("encoder branch enabled but no 'features' file given")
    if use_emb and not resolved["embedding_tables"]:
        raise ConfigError("word-vector branch enabled but 'embedding_tables' is empty")
    if resolved["learn_layer_weights"]:
        if resolved["layer_weights"] is not None:
            raise ConfigError("'layer_weights' and 'learn_layer_weights' are mutually exclusive")
        if resolved["fusion_mode"] != "layer_sequence":
            raise ConfigError("learnable layer weights need fusion_mode 'layer_sequence'")
    return resolved


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# pipeline assembly from a resolved config

def _stoplist_from(resolved) -> corpus.StopList | None:
    if not resolved["remove_stopwords"]:
        return None
    if resolved["stopwords"]:
        return corpus.StopList.from_file(resolved["stopwords"])
    return corpus.default_stoplist()


def _embedder_from(resolved) -> wordvec.UnifiedEmbedder:
    tables = []
    for entry in resolved["embedding_tables"]:
        tables.append(wordvec.load_text_vectors(
            entry["path"], format=entry["format"], name=entry["name"] or ""))
    o = resolved["oov"]
    policy = wordvec.OovPolicy(kind=o["kind"], low=o["low"], high=o["high"], seed=o["seed"])
    return wordvec.UnifiedEmbedder(tables, policy)


def _fuse_stack(stack: bertfuse.LayerStack, resolved) -> bertfuse.FusedSequence:
    if resolved["layers"]:
        stack = bertfuse.select_layers(stack, resolved["layers"])
    if resolved["pairing"] == "adjacent":
        pairing = bertfuse.adjacent_pairing(stack.n_layers)
    else:
        pairing = bertfuse.listed_pairing(stack.n_layers)
    if resolved["layer_weights"] is not None:
        weights = resolved["layer_weights"]
        if len(weights) != len(pairing):
            raise ConfigError(
                f"{len(weights)} layer_weights for {len(pairing)} layer pairs")
    else:
        weights = bertfuse.uniform_weights(len(pairing))
    return bertfuse.fuse(stack, pairing, weights, mode=resolved["fusion_mode"])


def _assemble_samples(records, resolved, features_path):
    """Per-record model inputs: (id, (fused, emb), target) triples.

    Also returns the input widths the model must be built with.
    """
    use_bert = resolved["branches"] in ("bert", "both")
    use_emb = resolved["branches"] in ("emb", "both")
    fused_map = {}
    if use_bert:
        stacks = bertfuse.stacks_by_id(bertfuse.read_hs_file(features_path))
        for r in records:
            stack = stacks.get(r.id)
            if stack is None:
                raise ConfigError(f"{features_path}: no hidden states for record {r.id!r}")
            fused_map[r.id] = _fuse_stack(stack, resolved)
    embedder = _embedder_from(resolved) if use_emb else None
    stop = _stoplist_from(resolved) if use_emb else None

    samples = []
    dims = {"fused_width": None, "n_pairs": None, "emb_dim": None}
    for r in records:
        fused = emb = None
        if use_bert:
            fused = fused_map[r.id]
            if dims["fused_width"] is None:
                dims["fused_width"], dims["n_pairs"] = fused.cols, fused.rows
            elif (fused.cols, fused.rows) != (dims["fused_width"], dims["n_pairs"]):
                raise ConfigError(
                    f"{features_path}: record {r.id!r} fuses to "
                    f"{fused.rows}x{fused.cols}, expected "
                    f"{dims['n_pairs']}x{dims['fused_width']}")
        if use_emb:
            seq = corpus.prepare(r, resolved["variant"], stop, resolved["max_len"])
            emb = embedder.build_matrix(seq)
            dims["emb_dim"] = embedder.total_dim
        samples.append((r.id, (fused, emb), r.mean_grade))
    return samples, dims


def _model_config_from(resolved, dims) -> model_lib.ModelConfig:
    use_bert = resolved["branches"] in ("bert", "both")
    use_emb = resolved["branches"] in ("emb", "both")
    kwargs = dict(
        use_bert_branch=use_bert,
        use_emb_branch=use_emb,
        emb_submodel=resolved["emb_submodel"],
        hidden_size=resolved["hidden_size"],
        dense_size=resolved["dense_size"],
        kernel_sizes=tuple(resolved["kernel_sizes"]),
        filters_per_kernel=resolved["filters_per_kernel"],
        dense_activation=resolved["dense_activation"],
        use_bias=resolved["use_bias"],
        learn_layer_weights=resolved["learn_layer_weights"],
        seed=resolved["seed"],
    )
    if use_bert:
        kwargs["fused_width"] = dims["fused_width"]
        kwargs["n_pairs"] = dims["n_pairs"]
    if use_emb:
        kwargs["emb_dim"] = dims["emb_dim"]
    return model_lib.ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# token files (TSV: id TAB space-joined tokens; or JSON lines)

def _write_token_file(sequences, path, jsonl: bool) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record_id, seq in sequences:
            if jsonl:
                fh.write(json.dumps({"id": record_id, "tokens": list(seq.tokens)},
                                    sort_keys=True))
            else:
                fh.write(f"{record_id}\t{' '.join(seq.tokens)}")
            fh.write("\n")


def _read_token_file(path, jsonl: bool) -> list[tuple[str, list[str]]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if jsonl:
                try:
                    obj = json.loads(line)
                    record_id, tokens = obj["id"], list(obj["tokens"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataFormatError(f"{path} line {lineno}: bad token row ({exc})") from exc
            else:
                if "\t" not in line:
                    raise DataFormatError(f"{path} line {lineno}: expected id<TAB>tokens")
                record_id, _, token_str = line.partition("\t")
                tokens = token_str.split(" ") if token_str else []
            rows.append((record_id, tokens))
    return rows


# ---------------------------------------------------------------------------
# subcommands

def cmd_preprocess(args) -> int:
    records = corpus.parse_dataset(args.data)
    stop = (corpus.StopList.from_file(args.stopwords) if args.stopwords
            else corpus.default_stoplist())
    sequences = [(r.id, corpus.prepare(r, args.variant, stop, args.max_len))
                 for r in records]
    _write_token_file(sequences, args.out, args.jsonl)
    print(f"records {len(sequences)}")
    return 0


def cmd_stats(args) -> int:
    records = corpus.parse_dataset(args.data)
    bins = corpus.grade_histogram(records, args.bin_width)
    print("bin,count")
    for left, count in bins:
        print(f"{left:.10g},{count}")
    print(f"total,{len(records)}")
    return 0


def cmd_pseudo_encode(args) -> int:
    rows = _read_token_file(args.tokens, args.jsonl)
    stacks = []
    for record_id, tokens in rows:
        effective = sum(1 for t in tokens if t != PAD_TOKEN)
        seq = TokenSequence(tuple(tokens), effective, len(tokens))
        stacks.append(bertfuse.pseudo_encode(
            seq, args.layers, args.hidden, args.seed, stack_id=record_id))
    bertfuse.write_hs_file(stacks, args.out)
    print(f"stacks {len(stacks)}")
    return 0


def cmd_train(args) -> int:
    raw = _load_json(args.config)
    if isinstance(raw, dict):
        # command-line overrides beat config-file keys
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.out_dir is not None:
            raw["out_dir"] = args.out_dir
        if args.epochs is not None or args.learning_rate is not None:
            section = dict(raw.get("train", {}) or {})
            if args.epochs is not None:
                section["epochs"] = args.epochs
            if args.learning_rate is not None:
                section["learning_rate"] = args.learning_rate
            raw["train"] = section
    resolved = validate_runconfig(raw)

    records = corpus.parse_dataset(resolved["train_data"])
    if not records:
        raise ConfigError(f"{resolved['train_data']}: training set is empty")
    samples, dims = _assemble_samples(records, resolved, resolved["features"])
    dataset = [(inputs, target) for _, inputs, target in samples]

    net = model_lib.IbenModel(_model_config_from(resolved, dims))
    train_config = train_lib.TrainConfig(seed=resolved["seed"], **resolved["train"])

    dev_rmse: list[float] = []
    callback = None
    if resolved["dev_data"]:
        if resolved["branches"] in ("bert", "both") and not resolved["dev_features"]:
            raise ConfigError("dev_data needs dev_features when the encoder branch is on")
        dev_records = corpus.parse_dataset(resolved["dev_data"])
        dev_samples, _ = _assemble_samples(dev_records, resolved, resolved["dev_features"])

        def callback(epoch, current):
            report = train_lib.evaluate_model(current, dev_samples, clamp=resolved["clamp"])
            dev_rmse.append(report.rmse)

    history = train_lib.train(net, dataset, train_config, epoch_callback=callback)

    out_dir = Path(resolved["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "model.ckpt"
    model_lib.save_checkpoint(net, ckpt_path, manifest=resolved)
    with open(out_dir / "history.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,dev_rmse\n" if dev_rmse else "epoch,train_loss\n")
        for i, loss in enumerate(history):
            row = f"{i + 1},{loss:.10f}"
            if dev_rmse:
                row += f",{dev_rmse[i]:.10f}"
            fh.write(row + "\n")
    with open(out_dir / "config.resolved.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(f"checkpoint {ckpt_path}")
    print(f"final_train_loss {history[-1]:.10f}")
    if dev_rmse:
        print(f"final_dev_rmse {dev_rmse[-1]:.10f}")
    return 0


def cmd_evaluate(args) -> int:
    net = model_lib.load_checkpoint(args.checkpoint)
    manifest = model_lib.checkpoint_manifest(args.checkpoint)
    if manifest is None:
        raise ConfigError(
            f"{args.checkpoint}: no embedded run manifest; cannot rebuild input features")
    resolved = validate_runconfig(manifest)
    features = args.features if args.features else resolved["features"]

    records = corpus.parse_dataset(args.data)
    if not records:
        raise ConfigError(f"{args.data}: nothing to evaluate")
    samples, _ = _assemble_samples(records, resolved, features)
    report = train_lib.evaluate_model(net, samples, clamp=args.clamp)

    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,y,yhat\n")
        for record_id, target, pred in report.rows:
            fh.write(f"{record_id},{target:.10f},{pred:.10f}\n")
    print(f"rmse {report.rmse:.10f}")
    print(f"n {report.n}")
    return 0


def cmd_baseline(args) -> int:
    train_records = corpus.parse_dataset(args.train)
    eval_records = corpus.parse_dataset(args.eval)
    rmse = train_lib.baseline_rmse(train_records, eval_records)
    print(f"rmse {rmse:.10f}")
    return 0


# ---------------------------------------------------------------------------
# gradient checking

_GRADCHECK_DIMS = {
    "small": dict(T=5, D=4, H=3, pairs=2, stack_hidden=4, emb_len=6,
                  kernels=(1, 2, 3, 4), filters=2, dense=3),
    "default": dict(T=8, D=8, H=6, pairs=3, stack_hidden=8, emb_len=10,
                    kernels=(1, 2, 3, 4), filters=3, dense=8),
}


def _away_from_kink(x: np.ndarray, margin: float = 0.3) -> np.ndarray:
    sign = np.where(x >= 0, 1.0, -1.0)
    return x + margin * sign


def _widen_max_margin(x: np.ndarray, bump: float = 0.05) -> np.ndarray:
    out = x.copy()
    top = out.argmax(axis=0)
    for col, row in enumerate(top):
        out[row, col] += bump
    return out


def gradcheck_report(dims: str = "small", seed: int = 0) -> list[tuple[str, float]]:
    """Worst finite-difference relative error per component."""
    if dims not in _GRADCHECK_DIMS:
        raise ValueError(f"unknown dims {dims!r}")
    d = _GRADCHECK_DIMS[dims]
    rng = np.random.default_rng(seed)
    report: list[tuple[str, float]] = []

    def check(name, fn, params):
        report.append((name, ad.grad_check(fn, params)))

    a = Parameter(rng.normal(size=(3, 4)), name="a")
    b = Parameter(rng.normal(size=(4, 2)), name="b")
    check("matmul", lambda: ad.total(ad.matmul(a, b)), [a, b])

    v = Parameter(rng.normal(size=7), name="v")
    check("sigmoid", lambda: ad.total(ad.sigmoid(v)), [v])
    check("tanh", lambda: ad.total(ad.tanh(v)), [v])

    r = Parameter(_away_from_kink(rng.normal(size=9)), name="r")
    check("relu", lambda: ad.total(ad.relu(r)), [r])

    e1 = Parameter(rng.normal(size=6), name="e1")
    e2 = Parameter(rng.normal(size=6), name="e2")
    check("elementwise_mix",
          lambda: ad.total(ad.hadamard(ad.sigmoid(e1), ad.tanh(e2))), [e1, e2])

    for k in d["kernels"]:
        x = Parameter(rng.normal(size=(d["T"], d["D"])), name=f"x{k}")
        kern = Parameter(rng.normal(size=(d["filters"], k, d["D"])), name=f"k{k}")
        bias = Parameter(rng.normal(size=d["filters"]), name=f"cb{k}")
        check(f"conv1d_k{k}",
              lambda x=x, kern=kern, bias=bias: ad.total(ad.conv1d(x, kern, bias)),
              [x, kern, bias])

    m = Parameter(_widen_max_margin(rng.normal(size=(6, 4))), name="m")
    check("max_over_time", lambda: ad.total(ad.max_over_time(m)), [m])
    check("avg_over_time", lambda: ad.total(ad.avg_over_time(m)), [m])

    cell = model_lib.GruCell(d["D"], d["H"], "gc", rng)
    xg = Parameter(rng.normal(size=d["D"]), name="xg")
    hg = Parameter(rng.normal(size=d["H"]), name="hg")
    check("gru_cell", lambda: ad.total(cell.step(xg, hg)),
          cell.parameters() + [xg, hg])

    bg = model_lib.BiGru(d["D"], d["H"], "bg", rng)
    seq = Parameter(rng.normal(size=(d["T"], d["D"])), name="seq")
    check("bi_gru",
          lambda: ad.total(model_lib.pool_states(model_lib.bi_gru(seq, bg))),
          bg.parameters() + [seq])

    config = model_lib.ModelConfig(
        fused_width=4 * d["stack_hidden"], n_pairs=d["pairs"], emb_dim=d["D"],
        hidden_size=d["H"], dense_size=d["dense"], kernel_sizes=d["kernels"],
        filters_per_kernel=d["filters"], seed=seed)
    net = model_lib.IbenModel(config)
    fused = rng.normal(size=(d["pairs"], 4 * d["stack_hidden"]))
    emb = rng.normal(size=(d["emb_len"], d["D"]))
    check("model_full", lambda: net.forward(fused=fused, emb=emb), net.parameters())

    return report


def cmd_gradcheck(args) -> int:
    report = gradcheck_report(args.dims, seed=args.seed)
    failed = False
    for name, err in report:
        ok = err <= GRADCHECK_THRESHOLD
        failed = failed or not ok
        print(f"{name:<16} {err:.3e} {'ok' if ok else 'FAIL'}")
    if failed:
        print(f"error: a component exceeded {GRADCHECK_THRESHOLD:g}", file=sys.stderr)
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iben",
        description="Regress the funniness of micro-edited news headlines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="CSV -> token file")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=("original", "edited"), required=True)
    p.add_argument("--stopwords", help="stoplist file (default: bundled list)")
    p.add_argument("--max-len", type=int, default=corpus.DEFAULT_MAX_LEN)
    p.add_argument("--out", required=True)
    p.add_argument("--jsonl", action="store_true", help="JSON lines instead of TSV")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("stats", help="mean-grade histogram as CSV on stdout")
    p.add_argument("--data", required=True)
    p.add_argument("--bin-width", type=float, default=0.2)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pseudo-encode", help="token file -> hidden-state container")
    p.add_argument("--tokens", required=True)
    p.add_argument("--layers", type=int, default=24)
    p.add_argument("--hidden", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--jsonl", action="store_true", help="token file is JSON lines")
    p.set_defaults(func=cmd_pseudo_encode)

    p = sub.add_parser("train", help="fit a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--learning-rate", type=float, help="override train.learning_rate")
    p.add_argument("--out-dir", help="override out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--features", help="hidden-state file for --data "
                                      "(default: the one in the checkpoint manifest)")
    p.add_argument("--clamp", action="store_true", help="bound predictions to [0, 3]")
    p.add_argument("--out", default="predictions.csv", help="predictions CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="constant mean-grade predictor RMSE")
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference check of every component")
    p.add_argument("--dims", choices=("small", "default"), default="small")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IbenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
