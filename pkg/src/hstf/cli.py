"""Command-line pipeline: ingest -> extract -> train -> eval, plus the
synthetic generator, sweeps and the imbalance study.

Exit codes: 0 ok, 1 usage error, 2 unreadable/invalid input, 3 write failure,
4 single-class training data, 5 model/config mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import capture, experiments, generator, http_flow
from .features import encode_flow, save_dataset
from .model import (ConfigMismatch, CorruptFile, HstfConfig, SingleClassDataset,
                    VersionMismatch, load_model, predict, predict_scores,
                    save_model, train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_WRITE = 3
EXIT_SINGLE_CLASS = 4
EXIT_MODEL_MISMATCH = 5


class _Parser(argparse.ArgumentParser):
    """argparse flavor whose usage errors exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--packet-size", type=int, default=400)
    parser.add_argument("--flow-size", type=int, default=4)
    parser.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hstf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="pcap -> NDJSON flows")
    p.add_argument("pcap")
    _add_common(p)
    p.add_argument("--label", default=http_flow.LABEL_UNLABELED,
                   choices=[http_flow.LABEL_BENIGN, http_flow.LABEL_MALICIOUS,
                            http_flow.LABEL_UNLABELED])
    p.add_argument("--mask", action="store_true",
                   help="hash sensitive header values before writing")

    p = sub.add_parser("gen", help="synthesize a labeled corpus")
    _add_common(p)
    p.add_argument("--benign", type=int, default=1000)
    p.add_argument("--malicious", type=int, default=300)
    p.add_argument("--profile", default=None,
                   help="JSON file with 'benign'/'malicious' profile overrides")
    p.add_argument("--pcap", default=None, help="also emit the corpus as a capture")

    p = sub.add_parser("extract", help="NDJSON flows -> encoded dataset file")
    p.add_argument("flows")
    _add_common(p)

    p = sub.add_parser("train", help="split, train and save a model")
    p.add_argument("flows")
    _add_common(p)
    p.add_argument("--proportion", default="3:10", help="malicious:benign ratio")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--stat-gate", type=float, default=1.0)
    p.add_argument("--early-stop-f1", type=float, default=None)
    p.add_argument("--history-out", default=None)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="score flows with a saved model")
    p.add_argument("model")
    p.add_argument("flows")
    _add_common(p)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("predict", help="per-flow label + score lines")
    p.add_argument("model")
    p.add_argument("flows")
    _add_common(p)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("sweep", help="packet/flow size sweep")
    p.add_argument("flows")
    _add_common(p)
    p.add_argument("--axis", choices=["packet_size", "flow_size"], required=True)
    p.add_argument("--values", required=True, help="comma-separated sizes")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--proportion", default="3:10")

    p = sub.add_parser("imbalance", help="metrics per training proportion")
    p.add_argument("flows")
    _add_common(p)
    p.add_argument("--proportions", default="3:10,1:4,1:8",
                   help="comma-separated malicious:benign ratios")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--curves-out", default=None)
    return parser


def _config_from(args, **overrides) -> HstfConfig:
    base = {"packet_size": args.packet_size, "flow_size": args.flow_size,
            "seed": args.seed}
    base.update(overrides)
    return HstfConfig(**base)


def _write_text(path, text) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_ingest(args) -> int:
    counts = {"packets": 0, "skipped_non_tcp": 0, "malformed": 0,
              "streams": 0, "non_http": 0, "lossy": 0, "flows": 0}

    def segments():
        for pkt in capture.read_capture(args.pcap):
            counts["packets"] += 1
            try:
                seg = capture.decode_segment(pkt)
            except capture.MalformedHeader:
                counts["malformed"] += 1
                continue
            if seg is None:
                counts["skipped_non_tcp"] += 1
                continue
            yield seg

    flows = []
    mask_cfg = http_flow.MaskConfig() if args.mask else None
    for pair in capture.reassemble(segments()):
        counts["streams"] += 1
        try:
            flow = http_flow.build_flow(pair, label=args.label)
        except http_flow.EmptyFlow:
            counts["non_http"] += 1
            continue
        if flow.lossy:
            counts["lossy"] += 1
        if mask_cfg:
            flow = http_flow.mask_flow(flow, mask_cfg)
        flows.append(flow)
    counts["flows"] = len(flows)
    out = args.out or "flows.ndjson"
    http_flow.write_flows(out, flows)
    print(json.dumps(counts))
    return EXIT_OK


def _load_profiles(path):
    benign = generator.default_benign_profile()
    trojan = generator.default_trojan_profile()
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if "benign" in raw:
            benign = generator.GeneratorProfile.from_dict(raw["benign"])
        if "malicious" in raw:
            trojan = generator.GeneratorProfile.from_dict(raw["malicious"])
    return benign, trojan


def cmd_gen(args) -> int:
    benign, trojan = _load_profiles(args.profile)
    flows = generator.generate_corpus(args.benign, args.malicious, seed=args.seed,
                                      benign_profile=benign, trojan_profile=trojan)
    out = args.out or "corpus.ndjson"
    http_flow.write_flows(out, flows)
    stats = generator.corpus_stats(flows)
    manifest = {"seed": args.seed, "benign": args.benign, "malicious": args.malicious,
                "benign_profile_hash": generator.profile_hash(benign),
                "malicious_profile_hash": generator.profile_hash(trojan),
                **stats}
    with open(str(out) + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    if args.pcap:
        generator.flows_to_pcap(flows, args.pcap, seed=args.seed)
    print(json.dumps({"flows": stats["flows"],
                      "mean_packet_size": round(stats["mean_packet_size"], 3),
                      "mean_flow_size": round(stats["mean_flow_size"], 3)}))
    return EXIT_OK


def cmd_extract(args) -> int:
    encoded = [encode_flow(f, args.packet_size, args.flow_size)
               for f in http_flow.read_flows(args.flows)]
    if not encoded:
        print("no flows to extract", file=sys.stderr)
        return EXIT_INPUT
    out = args.out or "dataset.bin"
    save_dataset(out, encoded)
    print(json.dumps({"flows": len(encoded), "out": str(out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    flows = list(http_flow.read_flows(args.flows))
    spec = experiments.ProportionSpec.parse(args.proportion)
    train_set, test_set = experiments.make_split(flows, spec, seed=args.seed)
    cfg = _config_from(args, epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.learning_rate, stat_gate=args.stat_gate)
    model, history = train(train_set, cfg, early_stop_f1=args.early_stop_f1,
                           verbose=not args.quiet)
    out = args.out or "model.hstf"
    save_model(model, out)
    if args.history_out:
        rows = "epoch,loss,precision,recall,f1,seconds\n" + "".join(
            f"{i + 1},{history.losses[i]:.4f},{history.precisions[i]:.4f},"
            f"{history.recalls[i]:.4f},{history.f1s[i]:.4f},"
            f"{history.epoch_seconds[i]:.4f}\n" for i in range(len(history)))
        _write_text(args.history_out, rows)
    scores = predict_scores(model, test_set)
    labels = [f.label == http_flow.LABEL_MALICIOUS for f in test_set]
    m = experiments.compute_metrics(scores >= 0.5, labels)
    print(f"precision={m.precision:.4f} recall={m.recall:.4f} f1={m.f_beta:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    flows = list(http_flow.read_flows(args.flows))
    if not flows:
        print("no flows to evaluate", file=sys.stderr)
        return EXIT_INPUT
    import time as _time
    t0 = _time.perf_counter()
    scores = predict_scores(model, flows)
    test_time = _time.perf_counter() - t0
    labels = [f.label == http_flow.LABEL_MALICIOUS for f in flows]
    m = experiments.compute_metrics(scores >= args.threshold, labels)
    _write_text(args.out,
                "flows,precision,recall,f1,test_time_s\n"
                f"{len(flows)},{m.precision:.4f},{m.recall:.4f},"
                f"{m.f_beta:.4f},{test_time:.4f}\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(args.model)
    lines = []
    for flow in http_flow.read_flows(args.flows):
        label, score = predict(flow, model, threshold=args.threshold)
        lines.append(f"{flow.flow_id},{label},{score:.6f}\n")
    _write_text(args.out, "".join(lines))
    return EXIT_OK


def cmd_sweep(args) -> int:
    flows = list(http_flow.read_flows(args.flows))
    values = [int(v) for v in args.values.split(",") if v]
    cfg = _config_from(args, epochs=args.epochs)
    rows = experiments.run_sweep(flows, args.axis, values, cfg,
                                 repeats=args.repeats,
                                 spec=experiments.ProportionSpec.parse(args.proportion))
    _write_text(args.out, experiments.metrics_table_csv(rows))
    return EXIT_OK


def cmd_imbalance(args) -> int:
    flows = list(http_flow.read_flows(args.flows))
    specs = [experiments.ProportionSpec.parse(p)
             for p in args.proportions.split(",") if p]
    cfg = _config_from(args, epochs=args.epochs)
    rows, curves = experiments.run_imbalance(flows, specs, cfg, repeats=args.repeats)
    _write_text(args.out, experiments.metrics_table_csv(rows))
    if args.curves_out:
        _write_text(args.curves_out, experiments.curves_csv(curves))
    return EXIT_OK


_COMMANDS = {"ingest": cmd_ingest, "gen": cmd_gen, "extract": cmd_extract,
             "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
             "sweep": cmd_sweep, "imbalance": cmd_imbalance}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SingleClassDataset as exc:
        print(f"hstf: single-class dataset: {exc}", file=sys.stderr)
        return EXIT_SINGLE_CLASS
    except (ConfigMismatch, VersionMismatch, CorruptFile) as exc:
        print(f"hstf: model/config mismatch: {exc}", file=sys.stderr)
        return EXIT_MODEL_MISMATCH
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"hstf: cannot read input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (capture.CaptureError, json.JSONDecodeError, ValueError, KeyError) as exc:
        print(f"hstf: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"hstf: write failure: {exc}", file=sys.stderr)
        return EXIT_WRITE


if __name__ == "__main__":
    raise SystemExit(main())
