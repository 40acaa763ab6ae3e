"""Single command-line entry point.

Subcommands: gen-data, train, eval, simulate, serve, saliency,
inspect-weights. Exit codes: 0 success, 1 usage or config problem, 2 data
error (unreadable or malformed files), 3 runtime error. Every
artifact-producing command writes a manifest.json next to its outputs with
the seed, the full config snapshot, and the produced paths; outputs contain
no wall-clock timestamps, so reruns with the same seed are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import threading

import numpy as np

from evsteer import __version__
from evsteer.config import (ConfigError, build_datagen_config,
                            build_runner_config, build_sim_config,
                            load_config)
from evsteer import evaluation, frames, wire
from evsteer.datagen import generate_recording
from evsteer.frames import (DvsAccumulator, FormatError, aps_normalize,
                            assemble_dataset, dvs_normalize, load_dataset,
                            load_recording, save_dataset, save_recording)
from evsteer.nnet import (AdamState, Decision, Network, WeightFileError,
                          adam_step, dump_activations, load_weights, op_count,
                          param_count, runtime_network, save_weights)
from evsteer.runner import (RunnerConfig, parse_runlog, run_closed_loop,
                            runlog_eval_records)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class DataError(Exception):
    pass


def write_manifest(out_dir, command, seeds, cfg, outputs):
    manifest = {
        "command": command,
        "config": cfg.snapshot(),
        "outputs": sorted(os.path.basename(p) for p in outputs),
        "seeds": seeds,
        "version": __version__,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_pgm(path, image):
    """8-bit binary PGM from a [0, 1] float image."""
    data = np.clip(np.asarray(image) * 255.0, 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    n = cfg["gen.recordings"] if args.recordings is None else args.recordings
    if n <= 0:
        print("gen-data: need at least one recording seed", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out, exist_ok=True)
    dg_cfg = build_datagen_config(cfg)
    seed_base = cfg["gen.seed_base"]
    outputs = []
    recordings = []
    for i in range(n):
        seed = seed_base + i
        rec = generate_recording(dg_cfg, seed)
        prefix = os.path.join(args.out, f"rec{i:03d}")
        save_recording(prefix, rec)
        outputs += [prefix + ext for ext in (".events", ".aps", ".labels")]
        recordings.append(rec)
        print(f"rec{i:03d}: seed {seed}, {len(rec.events)} events, "
              f"{len(rec.aps_t)} APS frames")
    train, test, report = assemble_dataset(
        recordings, capacity=cfg["frames.capacity"],
        aps_target_fraction=cfg["frames.aps_target_fraction"])
    train_path = os.path.join(args.out, "train.ds")
    test_path = os.path.join(args.out, "test.ds")
    save_dataset(train_path, train)
    save_dataset(test_path, test)
    report_path = os.path.join(args.out, "class_report.txt")
    with open(report_path, "w") as fh:
        for key in sorted(report):
            fh.write(f"{key}: {report[key]}\n")
    outputs += [train_path, test_path, report_path]
    write_manifest(args.out, "gen-data", list(range(seed_base, seed_base + n)),
                   cfg, outputs)
    print(f"train {len(train)} frames / test {len(test)} frames "
          f"(APS fraction {report['train_aps_fraction']:.3f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _dataset_accuracy(net, ds, batch=512):
    correct = 0
    for i in range(0, len(ds), batch):
        xb = ds.frames[i:i + batch][..., None]
        correct += int(np.sum(net.predict_batch(xb) == ds.labels[i:i + batch]))
    return correct / max(len(ds), 1)


def cmd_train(args, cfg):
    train = load_dataset(args.dataset)
    test = load_dataset(args.test) if args.test else None
    iters = cfg["train.iterations"] if args.iterations is None else args.iterations
    seed = cfg["train.seed"] if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    net = runtime_network(rng, dropout_rate=cfg["train.dropout"])
    state = AdamState.for_params(net.parameters(), lr=cfg["train.lr"])
    x = train.frames[..., None]
    y = train.labels.astype(np.int64)
    batch = cfg["train.batch"]
    eval_every = cfg["train.eval_every"]
    trace = ["iteration,loss,test_accuracy"]
    last_eval = ""
    for it in range(1, iters + 1):
        idx = rng.integers(0, len(x), batch)
        loss, grads = net.loss_and_backward(x[idx], y[idx], train=True, rng=rng)
        adam_step(net.parameters(), grads, state)
        if it % eval_every == 0 or it == iters:
            acc = "" if test is None else f"{_dataset_accuracy(net, test):.4f}"
            trace.append(f"{it},{loss:.6f},{acc}")
            last_eval = f" test_acc {acc}" if acc else ""
            print(f"iter {it}/{iters} loss {loss:.4f}{last_eval}")
        elif it == 1:
            trace.append(f"{it},{loss:.6f},")
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    save_weights(net, args.out)
    trace_path = args.trace or os.path.join(out_dir, "train_trace.csv")
    with open(trace_path, "w") as fh:
        fh.write("\n".join(trace) + "\n")
    write_manifest(out_dir, "train", [seed], cfg, [args.out, trace_path])
    print(f"weights -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _eval_dataset(net, ds, ps=range(0, 4)):
    decisions = net.predict_batch(ds.frames[..., None])
    records = evaluation.dataset_records(ds, decisions)
    return evaluation.evaluate_records(records, ps=ps)


def _sweep_capacities(net, rec_dir, capacities):
    """DVS error rate at p=0 per histogram capacity, last 20% of each recording."""
    prefixes = sorted(p[:-7] for p in os.listdir(rec_dir) if p.endswith(".events"))
    if not prefixes:
        raise DataError(f"no .events recordings in {rec_dir}")
    results = {}
    for cap in capacities:
        records = []
        for prefix in prefixes:
            rec = load_recording(os.path.join(rec_dir, prefix))
            boundary = int(0.8 * rec.label_t[-1])
            acc = DvsAccumulator(cap)
            for t_emit, hist in acc.add_batch(rec.events):
                if t_emit <= boundary:
                    continue
                values = dvs_normalize(hist, t_emit).values
                dec = Decision(int(net.predict_batch(values[None, ..., None])[0]))
                x = rec.label_at(t_emit)
                records.append(evaluation.EvalRecord(
                    decision=dec, truth_label=frames.label_from_target(x),
                    truth_target_x=x, source=frames.SOURCE_DVS, t=t_emit))
        results[cap] = 1.0 - evaluation.accuracy(records, 0)
    return results


def cmd_eval(args, cfg):
    net = load_weights(args.weights)
    lines = []
    outputs = []
    out_dir = args.out
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    if args.dataset:
        report = _eval_dataset(net, load_dataset(args.dataset))
        lines.append(f"== dataset {os.path.basename(args.dataset)} ==")
        lines.append(report.text())
        if out_dir:
            path = os.path.join(out_dir, "curve.csv")
            with open(path, "w") as fh:
                fh.write(report.curve_csv())
            outputs.append(path)
    if args.runlog:
        with open(args.runlog) as fh:
            parsed = parse_runlog(fh.read())
        records = runlog_eval_records(parsed, use_filtered=args.filtered)
        ts = [t for t, *_ in parsed["DEC"]]
        report = evaluation.evaluate_records(records, timestamps=ts)
        which = "filtered" if args.filtered else "raw"
        lines.append(f"== runlog {os.path.basename(args.runlog)} ({which}) ==")
        lines.append(report.text())
    if args.sweep_capacity:
        caps = [int(v) for v in args.sweep_capacity.split(",")]
        if not args.recordings:
            print("eval: --sweep-capacity needs --recordings", file=sys.stderr)
            return EXIT_USAGE
        results = _sweep_capacities(net, args.recordings, caps)
        lines.append("== DVS capacity sweep (error rate at p=0, test span) ==")
        for cap in caps:
            lines.append(f"capacity {cap}: error {results[cap]:.4f}")
    if not lines:
        print("eval: nothing to evaluate (need --dataset, --runlog, or "
              "--sweep-capacity)", file=sys.stderr)
        return EXIT_USAGE
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if out_dir:
        path = os.path.join(out_dir, "report.txt")
        with open(path, "w") as fh:
            fh.write(text)
        outputs.append(path)
        write_manifest(out_dir, "eval", [], cfg, outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args, cfg):
    run_cfg = build_runner_config(cfg)
    if args.duration is not None:
        run_cfg.duration_s = args.duration
    if args.dry_run:
        net = load_weights(args.weights)
        print(f"network ok: input {net.input_shape}, {param_count(net)} parameters, "
              f"{op_count(net)} ops/pass")
        print(cfg.dump(), end="")
        return EXIT_OK
    net = load_weights(args.weights)
    result = run_closed_loop(net, run_cfg, args.seed)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "run.log")
    with open(log_path, "w") as fh:
        fh.write(result.text())
    parsed = parse_runlog(result.text())
    records = runlog_eval_records(parsed, use_filtered=False)
    ts = [t for t, *_ in parsed["DEC"]]
    extra = {"catches": result.catches, "decisions": result.decisions}
    report = evaluation.evaluate_records(records, timestamps=ts, extra=extra)
    report_path = os.path.join(args.out, "report.txt")
    with open(report_path, "w") as fh:
        fh.write(report.text())
    curve_path = os.path.join(args.out, "curve.csv")
    with open(curve_path, "w") as fh:
        fh.write(report.curve_csv())
    write_manifest(args.out, "simulate", [args.seed], cfg,
                   [log_path, report_path, curve_path])
    print(report.text(), end="")
    print(f"log -> {log_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


def cmd_serve(args, cfg):
    net = load_weights(args.weights)
    peer = wire.parse_peer(args.peer or cfg["wire.peer"])
    listen = args.listen if args.listen is not None else cfg["wire.listen"]
    try:
        endpoint = wire.UdpEndpoint(peer=peer, listen_port=listen)
    except OSError as exc:
        print(f"serve: cannot bind port {listen}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    sent_stats = wire.LinkStats()
    feedback = wire.LinkStats()
    stop = threading.Event()

    def receive_loop():
        while not stop.is_set():
            data, _ = endpoint.recv(timeout=0.1)
            if data is None:
                continue
            try:
                fb = wire.decode_feedback(data)
            except wire.ProtocolError:
                feedback.malformed += 1  # counted, stream continues
                continue
            feedback.update(fb.seq)

    rx_thread = threading.Thread(target=receive_loop, daemon=True)
    rx_thread.start()

    decisions = 0
    sent = 0
    mailbox = wire.Mailbox()
    try:
        if args.sim:
            # live feed: the decision producer hands datagrams to the sender
            # thread through the latest-value mailbox, never blocking on it
            sent_log = []
            tx_thread = threading.Thread(
                target=lambda: wire.sender_loop(
                    mailbox, endpoint, on_sent=lambda d: sent_log.append(d.seq)),
                daemon=True)
            tx_thread.start()
            run_cfg = build_runner_config(cfg)
            if args.duration is not None:
                run_cfg.duration_s = args.duration

            def on_datagram(t_dec, datagram):
                nonlocal decisions
                decisions += 1
                sent_stats.update(datagram.seq, t_dec)
                mailbox.put(datagram)

            run_closed_loop(net, run_cfg, args.seed, on_datagram=on_datagram)
            mailbox.close()
            tx_thread.join(timeout=5.0)
            sent = len(sent_log)
        else:
            # file replay is an offline pump: send synchronously so every
            # novel decision yields exactly one datagram
            from evsteer.decision import DecisionFilter

            filt = DecisionFilter(build_runner_config(cfg).filter)
            encoder = wire.DecisionEncoder(cfg["wire.rate_cap_hz"])
            acc = DvsAccumulator(cfg["frames.capacity"])
            events = frames.read_events(args.events)
            queue = [(int(t), frames.SOURCE_DVS, hist)
                     for t, hist in acc.add_batch(events)]
            if args.aps:
                aps_t, aps_raw = frames.read_aps(args.aps)
                queue += [(int(t), frames.SOURCE_APS, raw)
                          for t, raw in zip(aps_t, aps_raw)]
            queue.sort(key=lambda item: (item[0], item[1]))
            for t, source, payload in queue:
                if source == frames.SOURCE_DVS:
                    values = dvs_normalize(payload, t).values
                else:
                    values = aps_normalize(payload, t).values
                filtered = filt.update(net.predict(values))
                t_dec, datagram = encoder.offer(filtered, t)
                decisions += 1
                sent_stats.update(datagram.seq, t_dec)
                if endpoint.send(datagram.encode()):
                    sent += 1
    except KeyboardInterrupt:
        print("interrupted, dumping stats", file=sys.stderr)
    finally:
        mailbox.close()
        stop.set()
        rx_thread.join(timeout=2.0)
        endpoint.close()
    print(f"decisions {decisions}, datagrams sent {sent}, "
          f"send errors {endpoint.send_errors}")
    print("decision intervals (sender side):")
    print(sent_stats.histogram_dump(), end="")
    print(f"feedback: {feedback.summary()}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# saliency / inspect
# ---------------------------------------------------------------------------


def cmd_saliency(args, cfg):
    net = load_weights(args.weights)
    try:
        target = Decision.from_name(args.klass)
    except ValueError as exc:
        print(f"saliency: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ds = load_dataset(args.dataset)
    if not 0 <= args.index < len(ds):
        print(f"saliency: index {args.index} outside dataset", file=sys.stderr)
        return EXIT_USAGE
    frame = ds.frames[args.index]
    sal = net.guided_backprop(frame, target)
    os.makedirs(args.out, exist_ok=True)
    map_path = os.path.join(args.out, f"saliency_{target.name}.pgm")
    overlay_path = os.path.join(args.out, f"overlay_{target.name}.pgm")
    write_pgm(map_path, sal)
    write_pgm(overlay_path, frame * (0.25 + 0.75 * sal))
    outputs = [map_path, overlay_path]
    if args.dump_activations:
        outputs += dump_activations(net, frame, os.path.join(args.out, "activations"))
    write_manifest(args.out, "saliency", [args.index], cfg, outputs)
    print(f"saliency -> {map_path}")
    return EXIT_OK


def cmd_inspect_weights(args, cfg):
    net = load_weights(args.weights)
    print(f"input: {net.input_shape[0]}x{net.input_shape[1]}x{net.input_shape[2]}")
    for layer, shape in zip(net.layers, net.layer_shapes[1:]):
        extra = ""
        if layer.params():
            extra = f"  params={layer.param_count()}"
        shape_txt = "x".join(str(v) for v in shape)
        print(f"  {layer.kind:<8} -> {shape_txt}{extra}")
    print(f"parameters: {param_count(net)}")
    print(f"operations per forward pass (multiplies + adds): {op_count(net)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="evsteer",
                     description="event-driven steering pipeline at desk scale")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config key (repeatable, wins over file)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate recordings and datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--recordings", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the runtime network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--test")
    p.add_argument("--out", required=True, help="weight file path")
    p.add_argument("--trace", help="loss/accuracy csv path")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate weights on datasets or run logs")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset")
    p.add_argument("--runlog")
    p.add_argument("--filtered", action="store_true",
                   help="evaluate filtered instead of raw decisions")
    p.add_argument("--sweep-capacity", metavar="N,N",
                   help="re-run DVS evaluation at these histogram capacities")
    p.add_argument("--recordings", help="recording directory for the sweep")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="closed-loop run with trained weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--out", default="simout")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve",
                       help="UDP decision server over an event file or live sim")
    p.add_argument("--weights", required=True)
    feed = p.add_mutually_exclusive_group(required=True)
    feed.add_argument("--events", help="recording event file to replay")
    feed.add_argument("--sim", action="store_true", help="live simulator feed")
    p.add_argument("--aps", help="recording APS file to interleave")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--peer")
    p.add_argument("--listen", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("saliency", help="guided-backprop map for one frame")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--class", dest="klass", required=True,
                   help="target class: L, C, R, or N")
    p.add_argument("--out", default="saliency_out")
    p.add_argument("--dump-activations", action="store_true")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("inspect-weights", help="layer table and counts")
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_inspect_weights)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, args.set)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, WeightFileError, DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
