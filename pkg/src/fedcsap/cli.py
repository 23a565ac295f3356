"""Command-line interface; a thin client of the HTTP service.

By default the commands talk to an in-process instance of the app (no
socket, no separate process); `--server URL` points them at a remote
instance instead. Either way all computation happens behind the same
HTTP contract, so the CLI and the service cannot drift apart.

Exit codes: 0 success, 1 gradient check failed, 2 bad configuration,
3 training diverged.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from pathlib import Path

import httpx

EXIT_OK = 0
EXIT_GRADCHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    # in-process client: requests are handled by a private app instance,
    # same contract as a remote server but no socket involved
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app())


def _load_config_dict(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        print(f"config error: cannot read {path}: {e}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)
    except json.JSONDecodeError as e:
        print(f"config error: {path} is not valid JSON: {e}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)
    if not isinstance(raw, dict):
        print(f"config error: {path} must contain a JSON object", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)
    return raw


def _apply_overrides(raw: dict, args: argparse.Namespace) -> dict:
    ablations = dict(raw.get("ablations") or {})
    if getattr(args, "disable_injection", False):
        ablations["disable_injection"] = True
    if getattr(args, "static_prompts", False):
        ablations["static_prompts"] = True
    if getattr(args, "crp_variant", None):
        ablations["crp_variant"] = args.crp_variant
    if ablations:
        raw["ablations"] = ablations
    if getattr(args, "seed", None) is not None:
        raw["master_seed"] = args.seed
    if getattr(args, "out", None):
        raw["output_dir"] = args.out
    return raw


def _print_config_errors(detail) -> None:
    print("config error:", file=sys.stderr)
    items = detail if isinstance(detail, list) else [detail]
    for item in items:
        print(f"  {item}", file=sys.stderr)


def _fail_from_response(resp: httpx.Response) -> int:
    """Map service errors back onto CLI exit codes."""
    try:
        detail = resp.json().get("detail")
    except ValueError:
        detail = resp.text
    if resp.status_code == 422:
        _print_config_errors(detail)
        return EXIT_CONFIG
    if isinstance(detail, dict) and detail.get("error") == "training_diverged":
        print(
            f"training diverged at round {detail['round']}, client {detail['client']}, "
            f"step {detail['step']}: {detail['cause']}",
            file=sys.stderr,
        )
        return EXIT_DIVERGED
    print(f"server error ({resp.status_code}): {detail}", file=sys.stderr)
    return EXIT_DIVERGED if resp.status_code == 500 else EXIT_CONFIG


def cmd_run(args: argparse.Namespace) -> int:
    raw = _apply_overrides(_load_config_dict(args.config), args)
    out_dir = raw.get("output_dir")
    if not out_dir:
        print(
            "config error: no output directory; set output_dir in the config or pass --out",
            file=sys.stderr,
        )
        return EXIT_CONFIG

    with _client(args.server) as client:
        resp = client.post("/runs", json={"config": raw})
        if resp.status_code != 200:
            return _fail_from_response(resp)
        summary = resp.json()
        run_id = summary["run_id"]
        metrics = client.get(f"/runs/{run_id}/metrics").text
        checkpoint = client.get(f"/runs/{run_id}/checkpoint").content
        resolved = client.get(f"/runs/{run_id}/config").text

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(resolved)
    (out / "metrics.csv").write_text(metrics)
    (out / "final.fckp").write_bytes(checkpoint)

    final = summary["final"]
    print(f"run {run_id}: {summary['reports']} reports over {summary['rounds']} rounds")
    print(
        f"final acc_local {final['acc_local']:.4f}  acc_base {final['acc_base']:.4f}  "
        f"acc_new {final['acc_new']:.4f}  hm {final['hm']:.4f}"
    )
    print(f"artifacts written to {out}/ (config.resolved.json, metrics.csv, final.fckp)")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    raw = _load_config_dict(args.config)
    with _client(args.server) as client:
        resp = client.post("/gradcheck", json={"config": raw})
    if resp.status_code != 200:
        return _fail_from_response(resp)
    report = resp.json()
    for name in sorted(report["blocks"]):
        print(f"{name}: max rel err {report['blocks'][name]:.3e}")
    for name in report["frozen"]:
        print(f"{name}: frozen/skipped (injection disabled)")
    status = "PASS" if report["passed"] else "FAIL"
    print(
        f"{status}: {report['parameter_count']} parameters, "
        f"max rel err {report['max_error']:.3e} vs tolerance {report['tolerance']:.0e}"
    )
    return EXIT_OK if report["passed"] else EXIT_GRADCHECK_FAILED


def cmd_eval(args: argparse.Namespace) -> int:
    raw = _load_config_dict(args.config)
    try:
        blob = Path(args.checkpoint).read_bytes()
    except OSError as e:
        print(f"config error: cannot read {args.checkpoint}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    payload = {"config": raw, "checkpoint_b64": base64.b64encode(blob).decode("ascii")}
    with _client(args.server) as client:
        resp = client.post("/eval", json=payload)
    if resp.status_code != 200:
        return _fail_from_response(resp)
    r = resp.json()
    print(f"acc_local {r['acc_local']:.4f}")
    print(f"acc_base  {r['acc_base']:.4f}")
    print(f"acc_new   {r['acc_new']:.4f}")
    print(f"hm        {r['hm']:.4f}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("fedcsap.service.app:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcsap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train per config, write metrics/checkpoint/resolved config")
    run.add_argument("--config", required=True, help="path to a JSON config file")
    run.add_argument("--disable-injection", action="store_true", help="ablation: no visual tokens")
    run.add_argument("--static-prompts", action="store_true", help="ablation: learned matrix instead of the generator")
    run.add_argument("--crp-variant", choices=["normalized", "unnormalized"], help="redundancy penalty flavor")
    run.add_argument("--seed", type=int, help="override master_seed")
    run.add_argument("--out", help="output directory (overrides output_dir in the config)")
    run.add_argument("--server", help="remote service URL (default: in-process)")
    run.set_defaults(func=cmd_run)

    gc = sub.add_parser("gradcheck", help="finite-difference audit of every trainable block")
    gc.add_argument("--config", required=True)
    gc.add_argument("--server", help="remote service URL (default: in-process)")
    gc.set_defaults(func=cmd_gradcheck)

    ev = sub.add_parser("eval", help="evaluate a stored checkpoint under a config")
    ev.add_argument("--checkpoint", required=True, help="path to a .fckp file")
    ev.add_argument("--config", required=True)
    ev.add_argument("--server", help="remote service URL (default: in-process)")
    ev.set_defaults(func=cmd_eval)

    sv = sub.add_parser("serve", help="run the HTTP service")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8400)
    sv.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        # argparse and the config loader exit directly; fold that into the
        # return-code contract so main() never raises
        return e.code if isinstance(e.code, int) else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
