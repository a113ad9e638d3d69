"""Thin command-line client for the experiment service.

By default the CLI mounts the FastAPI app in-process (no server needed);
``--server URL`` points it at a remote instance instead, and ``serve`` runs
one. Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numerical
failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import asyncio
import sys

import httpx

__all__ = ["entrypoint", "main"]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4

_KIND_CODES = {
    "config": EXIT_CONFIG,
    "missing-artifact": EXIT_MISSING,
    "numerical-failure": EXIT_NUMERICAL,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthbayes",
        description="Fine-tune subspaces of a toy depth network and run post-hoc Bayesian inference.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def add_command(name, help_text, seed=False, init=False):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="path to the experiment config file")
        sub.add_argument("--server", default=None, help="base URL of a running service (default: in-process)")
        if seed:
            sub.add_argument("--seed", type=int, default=None, help="restrict to one replicate seed")
        if init:
            sub.add_argument("--init", action="store_true", help="create the base model checkpoint if absent")
        return sub

    add_command("generate", "write the synthetic dataset split")
    add_command("finetune", "fine-tune the configured subspace and record checkpoints", seed=True, init=True)
    add_command("evaluate", "build the posterior and score the test split", seed=True)
    add_command("report", "aggregate evaluation CSVs into summary tables and plots")

    serve = commands.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _post(server: str | None, path: str, payload: dict) -> tuple[int, object]:
    if server is not None:
        with httpx.Client(base_url=server, timeout=None) as client:
            response = client.post(path, json=payload)
        return response.status_code, response.json()

    from .service import create_app

    async def call():
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(
            transport=transport, base_url="http://depthbayes.internal", timeout=None
        ) as client:
            return await client.post(path, json=payload)

    response = asyncio.run(call())
    return response.status_code, response.json()


def _report_outcome(status: int, body) -> int:
    if status == 200:
        print(body["detail"])
        for artifact in body.get("artifacts", []):
            print(f"  {artifact}")
        return EXIT_OK
    detail = body.get("detail") if isinstance(body, dict) else body
    if isinstance(detail, dict):
        kind = detail.get("kind", "")
        print(f"error ({kind}): {detail.get('message', detail)}", file=sys.stderr)
        return _KIND_CODES.get(kind, EXIT_FAILURE)
    print(f"error: {detail}", file=sys.stderr)
    if status == 422:
        return EXIT_CONFIG
    return EXIT_FAILURE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK

    try:
        with open(args.config, encoding="utf-8") as fh:
            config_text = fh.read()
    except OSError as exc:
        print(f"error (config): cannot read config file: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    payload: dict = {"config_text": config_text}
    if args.command == "finetune":
        payload["seed"] = args.seed
        payload["init"] = args.init
    elif args.command == "evaluate":
        payload["seed"] = args.seed

    try:
        status, body = _post(args.server, f"/v1/{args.command}", payload)
    except httpx.HTTPError as exc:
        print(f"error: cannot reach service: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return _report_outcome(status, body)


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
