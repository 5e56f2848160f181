"""Command line surface: run experiments, derive plans, serve and join.

Exit codes: 0 success, 2 invalid config or input, 3 federation abort,
4 connection refused, 5 protocol version mismatch.
"""

from __future__ import annotations

import argparse
import glob
import json
import math
import os
import sys

from .channels import TcpListener, tcp_connect
from .errors import (ChannelClosedError, ConfigError, FederationAbort,
                     ProtocolError, UsageError, VersionError)
from .experiment import ExperimentConfig, run_experiment
from .federation import FederationNode, FederationServer
from .fingerprint import (Fingerprint, aggregate_fingerprints,
                          extract_fingerprint, make_plan)
from .data import SyntheticCenterSpec, gen_center
from .wire import (MsgType, RoundMessage, SERVER_ID, json_payload, load_case,
                   read_state_dict_file, write_state_dict_file)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
EXIT_CONNECT = 4
EXIT_VERSION = 5

OUT_DIR_ENV = "FEDSEG_OUT_DIR"


def _out_path(path):
    base = os.environ.get(OUT_DIR_ENV)
    if base and not os.path.isabs(path):
        os.makedirs(base, exist_ok=True)
        return os.path.join(base, path)
    return path


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {what} {path!r}: {e}") from e


def _report_text(report):
    lines = [f"hd95 units: {report.hd95_units}",
             f"{'arm':<12}{'center':>7}{'dsc':>9}{'hd95':>10}"
             f"{'n_eval':>8}{'hd_undef':>9}"]
    for (arm, center) in sorted(report.rows):
        row = report.rows[(arm, center)]
        hd = "undef" if math.isnan(row["hd95"]) else f"{row['hd95']:.3f}"
        lines.append(f"{arm:<12}{center:>7}{row['dsc']:>9.4f}{hd:>10}"
                     f"{row['n_eval']:>8}{row['hd95_undefined']:>9}")
    for arm in report.arms():
        lines.append(f"mean dsc [{arm}]: {report.arm_mean_dsc(arm):.4f}")
    return "\n".join(lines) + "\n"


def cmd_run(args):
    cfg_dict = _load_json(args.config, "config")
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        report = run_experiment(cfg)
    except FederationAbort as e:
        print(f"federation aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    out = _out_path(args.out or cfg.output_path or "report")
    _write_json(out + ".json", report.to_dict())
    with open(out + ".txt", "w") as fh:
        fh.write(_report_text(report))
    print(_report_text(report), end="")
    return EXIT_OK


def cmd_fingerprint(args):
    prefixes = sorted(p[:-5] for p in
                      glob.glob(os.path.join(args.dataset_dir, "*.json")))
    if not prefixes:
        raise ConfigError(f"no case sidecars in {args.dataset_dir!r}")
    dataset = [load_case(p) for p in prefixes]
    fp = extract_fingerprint(dataset)
    payload = fp.to_dict()
    payload["node_id"] = args.node_id
    out = _out_path(args.out or "fingerprint.json")
    _write_json(out, payload)
    print(out)
    return EXIT_OK


def cmd_plan(args):
    contributions = []
    for i, path in enumerate(args.fingerprints):
        d = _load_json(path, "fingerprint file")
        try:
            fp = Fingerprint.from_dict(d)
        except (KeyError, TypeError, UsageError) as e:
            raise ConfigError(
                f"malformed fingerprint file {path!r}: {e}") from e
        contributions.append((int(d.get("node_id", i)), fp))
    global_fp = aggregate_fingerprints(contributions)
    plan = make_plan(global_fp, args.budget)
    out = _out_path(args.out or "plan.json")
    _write_json(out, plan.to_dict())
    print(json.dumps(plan.to_dict(), sort_keys=True, indent=2))
    return EXIT_OK


def cmd_serve(args):
    d = _load_json(args.config, "server config")
    expected = int(d.get("expected_nodes", 1))
    strategy = d.get("strategy", "asym")
    rounds = int(d.get("rounds", 1))
    listener = TcpListener(args.host, args.port)
    print(f"listening on {listener.address[0]}:{listener.port}", flush=True)
    dump = None
    if args.dump_aggregate:
        prefix = _out_path(args.dump_aggregate)

        def dump(round_idx, sd, _prefix=prefix):
            write_state_dict_file(f"{_prefix}.round{round_idx}.sd", sd)

    endpoints = []
    try:
        try:
            for _ in range(expected):
                endpoints.append(
                    listener.accept(timeout=float(d.get("timeout", 120))))
        except TimeoutError:
            # tell nodes that did show up before dropping their sockets
            payload = json_payload({"reason": "registration timeout",
                                    "missing": []})
            for ep in endpoints:
                try:
                    ep.send(RoundMessage(MsgType.ABORT, SERVER_ID, 0,
                                         payload))
                except Exception:
                    pass
            raise
        server = FederationServer(
            endpoints, expected, strategy, rounds,
            matching_mode=d.get("matching_mode", "strict"),
            weighted=bool(d.get("weighted", False)),
            timeout=float(d.get("timeout", 120)), dump_aggregate=dump)
        server.run()
    except (FederationAbort, TimeoutError) as e:
        print(f"federation aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    finally:
        listener.close()
    return EXIT_OK


def _parse_addr(addr):
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def cmd_join(args):
    host, port = _parse_addr(args.addr)
    try:
        endpoint = tcp_connect(host, port, timeout=args.timeout)
    except OSError as e:
        print(f"connection failed: {e}", file=sys.stderr)
        return EXIT_CONNECT
    kwargs = {}
    if args.state_dict:
        kwargs["state_dict"] = read_state_dict_file(args.state_dict,
                                                    node_id=args.node_id)
        node_id = args.node_id
    else:
        d = _load_json(args.node_config, "node config")
        node_id = int(d["node_id"])
        spec = SyntheticCenterSpec.from_dict(d["center"])
        kwargs = dict(dataset=gen_center(spec),
                      memory_budget=int(d.get("memory_budget",
                                              8 * 1024 ** 3)),
                      lr=float(d.get("lr", 0.05)),
                      seed=int(d.get("seed", 0)),
                      shared_init=bool(d.get("shared_init", True)),
                      epochs_per_round=int(d.get("epochs_per_round", 1)))
    node = FederationNode(endpoint, node_id, timeout=args.timeout, **kwargs)
    try:
        result = node.run()
    except VersionError as e:
        print(f"version mismatch: {e}", file=sys.stderr)
        return EXIT_VERSION
    except (FederationAbort, ProtocolError, TimeoutError,
            ChannelClosedError) as e:
        print(f"federation aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    finally:
        endpoint.close()
    if args.out:
        write_state_dict_file(_out_path(args.out), result.state_dict)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedseg",
        description="Federated segmentation experiments on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run experiment arms from a config file")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("fingerprint", help="fingerprint a dumped dataset dir")
    p.add_argument("dataset_dir")
    p.add_argument("--node-id", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_fingerprint)

    p = sub.add_parser("plan", help="aggregate fingerprints into a plan")
    p.add_argument("fingerprints", nargs="+")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("serve", help="run the coordinator over TCP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--config", required=True)
    p.add_argument("--dump-aggregate", default=None)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("join", help="join a federation as a node over TCP")
    p.add_argument("--addr", required=True)
    p.add_argument("--node-config", default=None)
    p.add_argument("--state-dict", default=None)
    p.add_argument("--node-id", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--timeout", type=float, default=120.0)
    p.set_defaults(fn=cmd_join)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "join" and not (args.state_dict or args.node_config):
        print("join needs --node-config or --state-dict", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
