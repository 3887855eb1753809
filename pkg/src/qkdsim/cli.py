"""Command-line entry point: ``qkdsim <subcommand> [scenario.json]``.

Exit codes: 0 success, 1 failed acceptance check, 2 configuration error,
3 runtime abort (QBER abort, fatal sync loss, failed reconciliation).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from . import __version__
from .photonics import ConfigError

log = logging.getLogger("qkdsim")

EXIT_OK, EXIT_VERIFY_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3

_SUBCOMMANDS = {"run-session": "SESSION", "sweep": "SWEEP", "run-network": "NETWORK",
                "run-qnrc": "QNRC", "verify": "VERIFY"}


class RuntimeAbort(RuntimeError):
    pass


def _versions() -> dict:
    import scipy
    return {"qkdsim": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_csv(path: Path, rows: list) -> None:
    """RFC-4180: CRLF line ends, minimal quoting, header from the first row."""
    buf = io.StringIO()
    if rows:
        fields = list(rows[0])
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\r\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r.get(k) for k in fields})
    path.write_bytes(buf.getvalue().encode())


def _json_default(x):
    if isinstance(x, (np.integer, np.bool_)):
        return x.item()
    if isinstance(x, np.floating):
        return float(x)
    raise TypeError(f"not serialisable: {type(x).__name__}")


def output_dir(scn, root: Optional[str]) -> Path:
    root = Path(root or scn.out or "runs")
    d = root / f"{scn.kind.value.lower()}-{scn.config_hash()[:16]}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_meta(out: Path, scn, extra: Optional[dict] = None) -> None:
    meta = {"kind": scn.kind.value, "seed": scn.seed, "config_hash": scn.config_hash(),
            "scenario": json.loads(scn.canonical()), "versions": _versions()}
    meta.update(extra or {})
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True,
                                              default=_json_default) + "\n")


# --------------------------------------------------------------------------
# runners
# --------------------------------------------------------------------------


def run_session(scn, out: Path) -> int:
    from . import syncctl as sc
    from .pipeline import run_pipeline
    from .postproc import write_key
    from .protocols import run_quantum_phase

    s = scn.session
    cfg = s.config(scn.seed)
    channel, det = s.channel.build(), s.detector.build()
    attack = None if s.attack is None else s.attack.build()
    extra = {}
    if s.sync is not None:
        alice, bob, _ = run_quantum_phase(cfg, channel, det, attack)
        if s.sync.inject_offset:
            bob = sc.inject_frame_offset(bob, s.sync.inject_offset, s.sync.inject_at)
        if s.sync.scramble_from is not None:
            rng = np.random.default_rng(np.random.SeedSequence([scn.seed, 1]))
            lo = s.sync.scramble_from
            bob.outcome[lo:] = rng.integers(0, 2, max(0, len(bob) - lo))
        rep = sc.monitor_session(alice, bob, s.sync.window, s.sync.baseline, s.sync.search_range)
        write_csv(out / "sync.csv", [
            {"window": i, "qber": q, "raw_qber": r, "class": c.value}
            for i, (q, r, c) in enumerate(zip(rep.qber, rep.raw_qber, rep.classes))])
        extra["sync"] = {"phase": rep.state.phase.value, "offset": rep.state.offset,
                         "transitions": [list(t) for t in rep.state.log],
                         "emitted_bits": rep.emitted_bits}
        log.info("sync: %s offset %s", rep.state.phase.value, rep.state.offset)
        if rep.state.phase is sc.SyncPhase.FATAL:
            write_meta(out, scn, extra)
            raise RuntimeAbort("synchronisation lost: session FATAL, key material zeroized")
    res = run_pipeline(cfg, channel, det, attack, params=s.params, mode=s.mode,
                       sparse=s.sparse, abort_threshold=s.abort_threshold)
    write_csv(out / "results.csv", [res.as_row()])
    if res.key_alice is not None and len(res.key_alice):
        write_key(out / "key.qkey", res.key_alice)
    extra["keys_match"] = bool(res.keys_match)
    write_meta(out, scn, extra)
    if res.aborted:
        raise RuntimeAbort(f"session aborted: {res.aborted}")
    return EXIT_OK


def run_sweep(scn, out: Path, jobs: int) -> int:
    from .plotting import plot_sweep
    from .sweep import sweep_distance

    res = sweep_distance(scn.sweep.build(), master_seed=scn.seed, jobs=jobs)
    write_csv(out / "results.csv", res.rows())
    write_csv(out / "fit.csv", [{"mode": f.mode, "slope": f.slope, "stderr": f.stderr,
                                 "points": f.points} for f in res.fits.values()])
    plot_sweep(res, out / "sweep.png")
    write_meta(out, scn)
    for f in res.fits.values():
        log.info("%s slope %.3f +- %.3f", f.mode, f.slope, f.stderr)
    return EXIT_OK


def _flip_first_bit(hop: int):
    from .netsim import TransportMessage

    def tamper(h, msg):
        if h != hop:
            return msg
        ct = bytearray(msg.ciphertext)
        ct[0] ^= 1
        return TransportMessage(bytes(ct), msg.tag, msg.path, msg.payload_len)
    return tamper


def run_network(scn, out: Path) -> int:
    from . import netsim as ns

    spec = scn.network
    net = ns.Network()
    for n in spec.nodes:
        net.add_node(n)
    for lk in spec.links:
        net.add_link(lk.u, lk.v, spec.link_config(lk.loss_db))
    curve = None
    if spec.provision is ns.ProvisionMode.RATE_MODEL:
        curve = ns.RateCurve.calibrate(spec.link_config(0.0), spec.curve_losses,
                                       spec.curve_pulses, seed=scn.seed)
    prov = ns.provision_links(net, spec.provision, spec.duration, curve=curve, seed=scn.seed)
    rng = np.random.default_rng(np.random.SeedSequence([scn.seed, 2]))
    rows = []
    for i, t in enumerate(spec.transports):
        payload = ns.SecretPayload.random(t.payload_bytes, rng)
        tamper = None if t.tamper_hop is None else _flip_first_bit(t.tamper_hop)
        rep = ns.transport(net, t.src, t.dst, payload, tamper=tamper)
        row = {"index": i, "src": t.src, "dst": t.dst, "payload_bits": payload.nbits}
        row.update(rep.as_row())
        row["intact"] = rep.delivered == payload.data
        rows.append(row)
    write_csv(out / "results.csv", rows)
    write_csv(out / "links.csv", [
        {"link": f"{a}-{b}", "deposited": prov.deposited[(a, b)],
         "available": net.stores[(a, b)].available, "consumed": net.stores[(a, b)].consumed,
         "flagged": (a, b) in net.flagged} for a, b in net.links()])
    write_meta(out, scn, {"flagged_links": [f"{a}-{b}" for a, b in prov.flagged]})
    return EXIT_OK


def run_qnrc_cmd(scn, out: Path) -> int:
    from .qnrc import run_qnrc

    q = scn.qnrc
    rng = np.random.default_rng(np.random.SeedSequence([scn.seed, 3]))
    res = run_qnrc(q.build(), q.n_symbols, q.seed_key, rng)
    write_csv(out / "results.csv", [res.as_row()])
    write_meta(out, scn)
    return EXIT_OK


def run_verify(scn, out: Path, jobs: int) -> int:
    from .acceptance import run_all, write_results

    results = run_all(scn.seed, jobs, scn.verify.criteria, echo=print)
    write_results(results, out, scn.seed)
    write_meta(out, scn)
    ok = all(r.ok for r in results)
    print(f"{sum(r.ok for r in results)}/{len(results)} criteria passed; results in {out}")
    return EXIT_OK if ok else EXIT_VERIFY_FAIL


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkdsim", description="Seedable QKD link and network simulator.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, kind in _SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=f"run a {kind} scenario")
        sp.add_argument("scenario", nargs="?" if kind in ("VERIFY", "SWEEP", "QNRC") else None,
                        help="JSON scenario file")
        sp.add_argument("--seed", type=int, help="master seed (overrides the file)")
        sp.add_argument("--out", help="output root directory (default: runs)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        if kind == "VERIFY":
            sp.add_argument("--only", type=int, nargs="+", metavar="ID",
                            help="run only these criteria")
    return p


def _load(args, kind: str):
    from .scenario import Scenario

    if args.scenario:
        raw = json.loads(Path(args.scenario).read_text())
    else:
        raw = {"kind": kind}
    if not isinstance(raw, dict):
        raise ConfigError("scenario file must hold a JSON object")
    raw.setdefault("kind", kind)
    if raw["kind"] != kind:
        raise ConfigError(f"kind: {raw['kind']!r} scenario given to a {kind} subcommand")
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "only", None):
        raw.setdefault("verify", {})["criteria"] = args.only
    return Scenario.model_validate(raw)


def main(argv: Optional[list] = None) -> int:
    level = os.environ.get("QKDSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    kind = _SUBCOMMANDS[args.command]
    try:
        scn = _load(args, kind)
    except ValidationError as e:
        print(f"config error: {_format_validation(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = output_dir(scn, args.out)
    log.info("%s scenario %s -> %s", kind, scn.config_hash()[:16], out)
    try:
        if kind == "SESSION":
            return run_session(scn, out)
        if kind == "SWEEP":
            return run_sweep(scn, out, args.jobs)
        if kind == "NETWORK":
            return run_network(scn, out)
        if kind == "QNRC":
            return run_qnrc_cmd(scn, out)
        return run_verify(scn, out, args.jobs)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeAbort as e:
        print(f"abort: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
