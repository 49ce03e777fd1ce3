"""Command-line client for the experiment service.

The CLI is a thin HTTP client: each verb posts a request to the service
API.  By default the service app runs in-process (no socket involved), so
`syncsim run --config exp.json` works standalone; pass `--server URL` to
talk to a remote `syncsim serve` instead.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import Dict, Optional, Tuple

import httpx


def _post(server: Optional[str], path: str, payload: Dict) -> Tuple[int, Dict]:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            resp = client.post(path, json=payload)
            return resp.status_code, resp.json()

    from .service import app  # imported lazily so --help stays fast

    async def go() -> Tuple[int, Dict]:
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(transport=transport, base_url="http://syncsim", timeout=None) as client:
            resp = await client.post(path, json=payload)
            return resp.status_code, resp.json()

    return asyncio.run(go())


def _load_config_dict(args: argparse.Namespace) -> Dict:
    path = Path(args.config)
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        sys.stderr.write(f"config file not found: {path}\n")
        raise SystemExit(2)
    except json.JSONDecodeError as exc:
        sys.stderr.write(f"config {path} is not valid JSON: {exc}\n")
        raise SystemExit(2)
    if getattr(args, "out", None):
        cfg["output_dir"] = args.out
    if getattr(args, "seeds", None):
        cfg["seeds"] = [int(s) for s in args.seeds.split(",") if s]
    if getattr(args, "sequential", False):
        cfg["execution"] = "sequential"
    return cfg


def _fail_on_error(status: int, body: Dict) -> None:
    if status == 422:
        sys.stderr.write("invalid config:\n")
        for err in body.get("detail", []):
            loc = ".".join(str(p) for p in err.get("loc", [])[1:])  # drop "body"
            sys.stderr.write(f"  {loc}: {err.get('msg')}\n")
        raise SystemExit(2)
    if status >= 400:
        sys.stderr.write(f"error ({status}): {body.get('detail', body)}\n")
        raise SystemExit(2)


def _cmd_run(args: argparse.Namespace) -> int:
    payload = {"config": _load_config_dict(args), "force": args.force}
    status, body = _post(args.server, "/run", payload)
    _fail_on_error(status, body)
    print(f"artifacts: {body['artifact_dir']}")
    for entry in body["report"]["summary"]:
        print(
            f"  {entry['model']:<11} id {entry['acc_test_id_mean']:.4f} "
            f"[{entry['acc_test_id_min']:.4f}, {entry['acc_test_id_max']:.4f}]  "
            f"ood {entry['acc_test_ood_mean']:.4f} "
            f"[{entry['acc_test_ood_min']:.4f}, {entry['acc_test_ood_max']:.4f}]"
        )
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    payload = {"config": _load_config_dict(args), "axis": args.axis, "force": args.force}
    status, body = _post(args.server, "/sweep", payload)
    _fail_on_error(status, body)
    print(f"artifacts: {body['artifact_dir']}")
    print(f"rows: {len(body['report']['rows'])}")
    return 0


def _cmd_costreport(args: argparse.Namespace) -> int:
    cost = None
    if args.profile:
        cost = json.loads(Path(args.profile).read_text(encoding="utf-8"))
    payload = {"cost": cost, "out_dir": args.out, "force": args.force}
    status, body = _post(args.server, "/costreport", payload)
    _fail_on_error(status, body)
    print(f"artifacts: {body['artifact_dir']}")
    for line in body["report"]["summary"]:
        print(f"  {line}")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    payload = {"config": _load_config_dict(args)}
    status, body = _post(args.server, "/verify-equivalence", payload)
    _fail_on_error(status, body)
    for check in body["checks"]:
        print(f"  [{'ok' if check['ok'] else 'MISMATCH'}] {check['check']}")
    if not body["ok"]:
        print("equivalence verification FAILED")
        return 1
    print("all equivalence checks passed")
    return 0


def _cmd_barrier(args: argparse.Namespace) -> int:
    payload = {"config": _load_config_dict(args), "num_points": args.points}
    status, body = _post(args.server, "/barrier-scan", payload)
    _fail_on_error(status, body)
    print(f"artifacts: {body['artifact_dir']}")
    for pair in body["report"]["pairs"]:
        print(f"  workers {pair['pair']}: barrier {pair['barrier']:.6f}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def _cmd_init(args: argparse.Namespace) -> int:
    from .harness import default_config

    cfg = default_config()
    Path(args.out).write_text(json.dumps(cfg.model_dump(by_alias=True), indent=2) + "\n", encoding="utf-8")
    print(f"wrote default config to {args.out}")
    return 0


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", help="override output_dir")
        p.add_argument("--seeds", help="comma-separated seed list override")
        p.add_argument("--sequential", action="store_true", help="force the deterministic sequential scheduler")
    p.add_argument("--server", help="base URL of a running service (default: in-process)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="syncsim", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    _add_common(p)
    p.add_argument("--force", action="store_true", help="recompute even if the artifact directory exists")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    _add_common(p)
    p.add_argument("--axis", required=True, help="one of: groups, nodes, ema_beta, wise_ft_alpha, lambda, epochs")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("costreport", help="communication cost model grid")
    p.add_argument("--profile", help="cost profile JSON (default: shipped calibration profiles)")
    p.add_argument("--out", default="artifacts/cost", help="output directory")
    p.add_argument("--force", action="store_true")
    p.add_argument("--server", help="base URL of a running service (default: in-process)")
    p.set_defaults(fn=_cmd_costreport)

    p = sub.add_parser("verify-equivalence", help="bitwise cross-checks between sync implementations")
    _add_common(p)
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("barrier-scan", help="loss along straight lines between local workers")
    _add_common(p)
    p.add_argument("--points", type=int, default=21)
    p.set_defaults(fn=_cmd_barrier)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.set_defaults(fn=_cmd_serve)

    p = sub.add_parser("init-config", help="write the default experiment config")
    p.add_argument("--out", default="experiment.json")
    p.set_defaults(fn=_cmd_init)

    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
