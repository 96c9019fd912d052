"""Thin command-line client for the experiment service.

Every subcommand is sent through the HTTP layer: against a remote server if
--server is given, otherwise against an in-process instance of the app over
an ASGI transport, so local and remote behavior are identical. Exit codes:

    0  success
    2  configuration problem (bad config file, bad flags)
    3  missing prerequisite artifact (run the earlier command first)
    4  numeric failure (non-finite loss or metric)
    1  anything else
"""

from __future__ import annotations

import argparse
import asyncio
import sys

import httpx

from . import __version__
from .pipeline import COMMANDS, DEFAULT_SAMPLE_COUNT
from .prototypes import HEADS

_EXIT_BY_CATEGORY = {"config": 2, "missing-prerequisite": 3, "numeric": 4,
                     "internal": 1}
_EXIT_BY_STATUS = {400: 2, 409: 3, 422: 4}

_NEEDS_HEAD = ("train-proto", "explain")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protodiff",
        description="mask-conditioned diffusion with prototype explanations")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    help_text = {
        "gen-data": "generate the phantom dataset",
        "train-diffusion": "train the denoiser on the dataset",
        "sample": "generate images conditioned on dataset masks",
        "trajectory": "record a denoising trajectory",
        "train-proto": "train a prototype head (needs --head)",
        "explain": "write per-image explanation reports (needs --head)",
        "evaluate": "compute image metrics for the generated samples",
        "compare": "compare faithfulness across all configured heads",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=help_text[name])
        p.add_argument("--config", required=True, help="INI experiment config")
        p.add_argument("--head", choices=HEADS,
                       required=name in _NEEDS_HEAD,
                       help="prototype head" if name in _NEEDS_HEAD
                       else argparse.SUPPRESS)
        p.add_argument("--count", type=int, default=None,
                       help=f"images to generate (default {DEFAULT_SAMPLE_COUNT})"
                       if name == "sample" else argparse.SUPPRESS)
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
        p.add_argument("--ids", default=None,
                       help="comma-separated generated-image ids"
                       if name == "explain" else argparse.SUPPRESS)
        p.add_argument("--server", default=None,
                       help="base URL of a running service; default in-process")

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _payload(args: argparse.Namespace) -> dict:
    ids = None
    if getattr(args, "ids", None):
        ids = [s.strip() for s in args.ids.split(",") if s.strip()]
    return {"config_path": args.config, "head": args.head,
            "count": args.count, "out": args.out, "seed": args.seed,
            "image_ids": ids}


async def _post_local(command: str, payload: dict) -> tuple[int, dict]:
    from .api import create_app
    transport = httpx.ASGITransport(app=create_app())
    async with httpx.AsyncClient(transport=transport,
                                 base_url="http://protodiff.local",
                                 timeout=None) as client:
        resp = await client.post(f"/commands/{command}", json=payload)
        return resp.status_code, resp.json()


def _post_remote(server: str, command: str, payload: dict) -> tuple[int, dict]:
    url = server.rstrip("/") + f"/commands/{command}"
    resp = httpx.post(url, json=payload, timeout=None)
    return resp.status_code, resp.json()


def _report(status: int, body: dict) -> int:
    if status == 200:
        print(body["summary"])
        return 0
    error = body.get("error")
    if isinstance(error, dict) and "category" in error:
        print(f"error ({error['category']}): {error.get('message', '')}",
              file=sys.stderr)
        return _EXIT_BY_CATEGORY.get(error["category"], 1)
    print(f"error (HTTP {status}): {body}", file=sys.stderr)
    return _EXIT_BY_STATUS.get(status, 1)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .api import create_app
        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    payload = _payload(args)
    try:
        if args.server:
            status, body = _post_remote(args.server, args.command, payload)
        else:
            status, body = asyncio.run(_post_local(args.command, payload))
    except httpx.HTTPError as exc:
        print(f"error (transport): {exc}", file=sys.stderr)
        return 1
    return _report(status, body)


if __name__ == "__main__":
    sys.exit(main())
