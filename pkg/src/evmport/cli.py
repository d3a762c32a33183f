"""Command-line front end (``evmport`` / ``python -m evmport``).

Exit status: 0 success, 1 verification mismatch, 2 usage or planning error,
3 chain or transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

from .chain import ChainError, EmbeddedChain
from .codegen import ChunkingImpossible, GasLimitExceeded, generate_deploy_code, generate_proxy_set
from .evm import DEFAULT_SCHEDULE, GasSchedule
from .index import BlockRangeUnavailable, DeploymentNotFound, TransactionIndex, index_transactions
from .migrate import (
    AddressPredictionMismatch,
    DeploymentFailure,
    Manifest,
    MigrationError,
    ReplaySource,
    ReusePolicy,
    Strategy,
    execute_migration,
    manifest_from_plan,
    plan_migration,
    verdicts_to_json,
    verify_manifest,
)
from .reconstruct import (
    MissingDeployment,
    ParseError,
    ReplayDivergence,
    apply_diffs,
    ingest_trace_file,
    load_journal,
    replay_journal,
)
from .rpc import RpcChain, make_server
from .snapshot import StateSnapshot
from .trie import BadProof, secure_storage_root

log = logging.getLogger("evmport")

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_CHAIN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception, code: int):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.code = code


def _address(text: str) -> bytes:
    body = text[2:] if text.lower().startswith("0x") else text
    try:
        raw = bytes.fromhex(body)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a hex address: {text}") from None
    if len(raw) != 20:
        raise argparse.ArgumentTypeError(f"address must be 20 bytes: {text}")
    return raw


def _hexdata(text: str) -> bytes:
    if text.startswith("@"):
        text = Path(text[1:]).read_text().strip()
    body = text[2:] if text.startswith("0x") else text
    try:
        return bytes.fromhex(body)
    except ValueError:
        raise argparse.ArgumentTypeError("expected hex data") from None


def open_chain(spec: str, timeout: float = 10.0, create: bool = False, chain_id: int | None = None):
    """``embedded:PATH`` opens a chain file; ``http(s)://`` a JSON-RPC endpoint."""
    if spec.startswith("embedded:"):
        return EmbeddedChain.open(spec[len("embedded:"):], create=create)
    if spec.startswith(("http://", "https://")):
        return RpcChain(spec, timeout=timeout, expected_chain_id=chain_id)
    raise UsageError(f"unrecognized chain endpoint {spec!r}; use embedded:PATH or http(s)://URL")


def _schedule(args) -> GasSchedule:
    if getattr(args, "gas_limit", None):
        return DEFAULT_SCHEDULE.with_gas_limit(args.gas_limit)
    return DEFAULT_SCHEDULE


def _emit(obj, args) -> None:
    print(json.dumps(obj, indent=None if getattr(args, "compact", False) else 1))


# -- commands ------------------------------------------------------------------------


def cmd_chain_init(args) -> int:
    path = Path(args.path)
    if path.exists() and not args.force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    chain = EmbeddedChain(DEFAULT_SCHEDULE.with_gas_limit(args.gas_limit or DEFAULT_SCHEDULE.block_gas_limit), args.chain_id, path)
    chain.save()
    print(f"created embedded chain {path} (chain id {args.chain_id})")
    return EXIT_OK


def cmd_chain_send(args) -> int:
    chain = EmbeddedChain.open(args.path, create=False)
    receipt = chain.send_transaction(args.sender, args.to, args.data, args.gas)
    _emit(receipt.to_json(), args)
    return EXIT_OK if receipt.status else EXIT_CHAIN


def cmd_chain_serve(args) -> int:
    chain = EmbeddedChain.open(args.path, create=False)
    server = make_server(chain, args.host, args.port, disabled=args.disable or ())
    host, port = server.server_address[:2]
    print(f"serving {args.path} on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_index(args) -> int:
    chain = open_chain(args.source, args.timeout)
    journal = index_transactions(
        chain, args.contract, TransactionIndex(args.index_dir), args.from_block, args.to_block, args.workers
    )
    print(f"0x{args.contract.hex()}: {len(journal)} transactions indexed")
    return EXIT_OK


def _snapshot_json(snapshot: StateSnapshot) -> dict:
    return {hex(k): hex(v) for k, v in snapshot.sorted_items()}


def cmd_replay(args) -> int:
    schedule = _schedule(args)
    if args.trace_file:
        snapshot = apply_diffs(StateSnapshot(), ingest_trace_file(args.trace_file))
        _emit({"root": "0x" + secure_storage_root(snapshot).hex(), "storage": _snapshot_json(snapshot)}, args)
        return EXIT_OK
    if args.journal:
        journal = load_journal(args.journal, args.contract)
    elif args.source and args.contract:
        journal = index_transactions(open_chain(args.source, args.timeout), args.contract, TransactionIndex(args.index_dir))
    else:
        raise UsageError("replay needs --trace-file, --journal, or --source with --contract")
    result = replay_journal(journal, schedule, args.contract, args.block)
    _emit(
        {
            "contract": "0x" + result.contract.hex(),
            "block_height": result.snapshot.block_height,
            "root": "0x" + secure_storage_root(result.snapshot).hex(),
            "runtime_code": "0x" + result.runtime_code.hex(),
            "storage": _snapshot_json(result.snapshot),
            "skipped": len(result.skipped),
        },
        args,
    )
    return EXIT_OK


def cmd_deploy_code(args) -> int:
    schedule = _schedule(args)
    doc = json.loads(Path(args.snapshot).read_text())
    storage = doc.get("storage", doc)
    snapshot = StateSnapshot({int(k, 16): int(v, 16) for k, v in storage.items()})
    if args.strategy == "proxy":
        if args.deployer is None:
            raise UsageError("--strategy proxy needs --deployer and --nonce")
        _emit(generate_proxy_set(snapshot, args.runtime, args.deployer, args.nonce, schedule).to_json(), args)
    else:
        artifact = generate_deploy_code(snapshot, args.runtime, schedule, enforce_limit=args.strategy == "single")
        _emit(artifact.to_json(), args)
    return EXIT_OK


def _plan(args, source_chain, schedule):
    index_dir = args.index_dir or tempfile.mkdtemp(prefix="evmport-index-")
    source = ReplaySource(source_chain, TransactionIndex(index_dir), args.block, schedule)
    existing = {}
    if args.address_map:
        raw = json.loads(Path(args.address_map).read_text())
        existing = {_address(k): _address(v) for k, v in raw.items()}
    strategy = None if args.strategy == "auto" else Strategy(args.strategy)
    plan = plan_migration(args.contract, source, schedule, ReusePolicy(args.reuse_policy), existing, strategy, source.block_height)
    return plan, source


def _plan_summary(plan) -> dict:
    return {
        "root": "0x" + plan.root.hex(),
        "block_height": plan.block_height,
        "total_gas": plan.total_gas(),
        "nodes": [
            {
                "address": "0x" + a.hex(),
                "strategy": plan.nodes[a].strategy.value,
                "gas_estimate": plan.nodes[a].gas_estimate,
                "slots": len(plan.nodes[a].snapshot),
                "children": ["0x" + c.hex() for c in plan.nodes[a].children],
            }
            for a in plan.order
        ],
    }


def cmd_plan(args) -> int:
    schedule = _schedule(args)
    chain = _stage("source", lambda: open_chain(args.source, args.timeout))
    plan, _ = _stage("plan", lambda: _plan(args, chain, schedule))
    if args.manifest:
        manifest = manifest_from_plan(plan, source_chain=args.source, gas_limit=schedule.block_gas_limit)
        manifest.save(args.manifest)
    _emit(_plan_summary(plan), args)
    return EXIT_OK


def cmd_migrate(args) -> int:
    schedule = _schedule(args)
    manifest = None
    if args.resume:
        manifest = _stage("manifest", lambda: Manifest.load(args.manifest))
        if args.block is None:
            args.block = manifest.block_height
        elif args.block != manifest.block_height:
            raise UsageError(f"--block {args.block} disagrees with the manifest's {manifest.block_height}")
    elif Path(args.manifest).exists():
        raise UsageError(f"{args.manifest} exists; pass --resume to continue it")

    source_chain = _stage("source", lambda: open_chain(args.source, args.timeout))
    target = _stage("target", lambda: open_chain(args.target, args.timeout, create=True))
    plan, source = _stage("plan", lambda: _plan(args, source_chain, schedule))
    if manifest is None:
        manifest = manifest_from_plan(
            plan, source_chain=args.source, target_chain=args.target, deployer=args.deployer,
            gas_limit=schedule.block_gas_limit,
        )
        manifest.path = Path(args.manifest)
        manifest.save()
    manifest = _stage("deploy", lambda: execute_migration(plan, target, args.deployer, schedule, manifest))

    verdicts = _stage("verify", lambda: verify_manifest(manifest, source, target))
    manifest.verdicts = verdicts_to_json(verdicts)
    manifest.save()
    root_verdict = verdicts[plan.root]
    _emit({"address_map": {"0x" + k.hex(): "0x" + v.hex() for k, v in manifest.address_map.items()},
           "verdicts": manifest.verdicts}, args)
    return EXIT_OK if root_verdict.passed else EXIT_MISMATCH


def cmd_verify(args) -> int:
    manifest = _stage("manifest", lambda: Manifest.load(args.manifest))
    source_chain = _stage("source", lambda: open_chain(args.source or manifest.source_chain, args.timeout))
    target = _stage("target", lambda: open_chain(args.target or manifest.target_chain, args.timeout))
    schedule = DEFAULT_SCHEDULE.with_gas_limit(manifest.gas_limit)
    index_dir = args.index_dir or tempfile.mkdtemp(prefix="evmport-verify-")
    source = ReplaySource(source_chain, TransactionIndex(index_dir), manifest.block_height, schedule)
    verdicts = _stage("verify", lambda: verify_manifest(manifest, source, target))
    report = verdicts_to_json(verdicts)
    if args.json:
        _emit(report, args)
    else:
        for address, v in report.items():
            status = "ok" if v["passed"] else "FAIL"
            detail = f" ({v['detail']})" if v["detail"] else ""
            print(f"{status} {address} code_equal={v['code_equal']} state={v['state']}{detail}")
    return EXIT_OK if verdicts[manifest.root].passed else EXIT_MISMATCH


# -- plumbing ---------------------------------------------------------------------------

_USAGE_ERRORS = (
    UsageError, MigrationError, GasLimitExceeded, ChunkingImpossible, ParseError, DeploymentNotFound,
    MissingDeployment, ReplayDivergence, BlockRangeUnavailable, ValueError, OSError,
)
_CHAIN_ERRORS = (ChainError, DeploymentFailure, AddressPredictionMismatch, BadProof)


def _stage(stage: str, fn):
    try:
        return fn()
    except _CHAIN_ERRORS as exc:
        raise StageError(stage, exc, EXIT_CHAIN) from exc
    except _USAGE_ERRORS as exc:
        raise StageError(stage, exc, EXIT_USAGE) from exc


def _common(p, source=True, target=False):
    if source:
        p.add_argument("--source", help="source chain: embedded:PATH or http(s)://URL")
    if target:
        p.add_argument("--target", help="target chain: embedded:PATH or http(s)://URL")
    p.add_argument("--timeout", type=float, default=10.0, help="JSON-RPC timeout in seconds")


def _planning(p):
    p.add_argument("--contract", type=_address, required=True)
    p.add_argument("--block", type=int, help="source block height (default: head)")
    p.add_argument("--gas-limit", type=int, help="block gas limit to plan against")
    p.add_argument("--strategy", choices=["auto", "single", "proxy"], default="auto")
    p.add_argument("--reuse-policy", choices=[p.value for p in ReusePolicy], default="redeploy")
    p.add_argument("--address-map", help="JSON {source: target} of contracts already on the target")
    p.add_argument("--index-dir", help="transaction index directory (default: a fresh temporary one)")


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("-v", "--verbose", action="count", default=0)
    shared.add_argument("--compact", action="store_true", help="single-line JSON output")
    parser = argparse.ArgumentParser(prog="evmport", description="Move contracts and their storage between EVM chains.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(subs, name, **kw):
        return subs.add_parser(name, parents=[shared], **kw)

    chain = sub.add_parser("chain", help="manage an embedded chain file")
    csub = chain.add_subparsers(dest="chain_command", required=True)
    p = add(csub, "init", help="create an empty chain file")
    p.add_argument("path")
    p.add_argument("--chain-id", type=int, default=1337)
    p.add_argument("--gas-limit", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_chain_init)
    p = add(csub, "send", help="send one transaction")
    p.add_argument("path")
    p.add_argument("--from", dest="sender", type=_address, required=True)
    p.add_argument("--to", type=_address)
    p.add_argument("--data", type=_hexdata, default=b"", help="hex calldata or @file")
    p.add_argument("--gas", type=int, required=True)
    p.set_defaults(func=cmd_chain_send)
    p = add(csub, "serve", help="expose a chain file over JSON-RPC")
    p.add_argument("path")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8545)
    p.add_argument("--disable", action="append", help="answer this method as unsupported")
    p.set_defaults(func=cmd_chain_serve)

    p = add(sub, "index", help="index a contract's transactions")
    _common(p)
    p.add_argument("--contract", type=_address, required=True)
    p.add_argument("--index-dir", required=True)
    p.add_argument("--from-block", type=int, default=0)
    p.add_argument("--to-block", type=int)
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_index)

    p = add(sub, "replay", help="rebuild storage from a journal or a trace file")
    _common(p)
    p.add_argument("--contract", type=_address)
    p.add_argument("--journal")
    p.add_argument("--trace-file")
    p.add_argument("--block", type=int)
    p.add_argument("--gas-limit", type=int)
    p.add_argument("--index-dir", default=None)
    p.set_defaults(func=cmd_replay)

    p = add(sub, "deploy-code", help="emit deploy artifacts for a storage snapshot")
    p.add_argument("--snapshot", required=True, help="JSON {slot: value} or replay output")
    p.add_argument("--runtime", type=_hexdata, required=True, help="runtime code hex or @file")
    p.add_argument("--strategy", choices=["single", "proxy", "unchecked"], default="single")
    p.add_argument("--deployer", type=_address)
    p.add_argument("--nonce", type=int, default=0)
    p.add_argument("--gas-limit", type=int)
    p.set_defaults(func=cmd_deploy_code)

    p = add(sub, "plan", help="plan a migration without sending anything")
    _common(p)
    _planning(p)
    p.add_argument("--manifest", help="write the planned manifest here")
    p.set_defaults(func=cmd_plan)

    p = add(sub, "migrate", help="plan, deploy and self-verify")
    _common(p, target=True)
    _planning(p)
    p.add_argument("--deployer", type=_address, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_migrate)

    p = add(sub, "verify", help="check a migration against its manifest")
    _common(p, target=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--index-dir", help="index directory (default: a fresh temporary one)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    needs_source = args.command in ("plan", "migrate", "index")
    if needs_source and not args.source:
        parser.error("--source is required")
    if args.command == "migrate" and not args.target:
        parser.error("--target is required")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"evmport: error {exc}", file=sys.stderr)
        return exc.code
    except _CHAIN_ERRORS as exc:
        print(f"evmport: error [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHAIN
    except _USAGE_ERRORS as exc:
        print(f"evmport: error [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
