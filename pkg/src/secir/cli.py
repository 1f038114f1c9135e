"""Command-line entry points for the five roles and the verification tools.

Roles: dealer-gen (trusted randomness to files), owner-outsource (split and
store images), server-run (one of the two compute servers, build or serve
mode), user-query (trapdoor in, decrypted results out), oracle-run (the
plaintext mirror), plus meter-report and verify-equivalence.

Exit codes: 0 success, 2 config/usage, 3 protocol violation, 4 material
exhausted, 5 equivalence failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import errors as E
from .config import SessionConfig
from .corpus import make_corpus, make_queries
from .dealer import MaterialStream, generate_material_files
from .decisions import DecisionLog
from .errors import ConfigError, ConfigMismatch, MaterialExhausted, ProtocolViolation
from .index import load_hkm, load_lsh, save_hkm, save_lsh
from .nn import load_model, make_demo_model, save_model
from .oracle import PlaintextPipeline
from .pca import PcaState
from .pipeline import (BuiltIndex, ShareStore, StageMeter, build_party,
                       decrypt_result, make_trapdoor, outsource,
                       provision_counts, query_party)
from .session import PartySession
from .sharing import PartyId, Share, read_share_file, write_share_file
from .transport import TAG_RAW, tcp_connect, tcp_listen


def _party_dir(data_dir: str, party: int) -> str:
    return os.path.join(data_dir, f"p{party}")


def _ensure_dirs(base: str) -> None:
    for sub in ("shares", "material", "index"):
        os.makedirs(os.path.join(base, sub), exist_ok=True)


def _load_store(base: str, party: PartyId) -> ShareStore:
    store = ShareStore(party)
    share_dir = os.path.join(base, "shares")
    for name in sorted(os.listdir(share_dir)):
        if not name.endswith(".share"):
            continue
        image_id = int(name.split("_")[1].split(".")[0])
        store.images[image_id] = read_share_file(os.path.join(share_dir, name)).values
    return store


def _open_peer_channel(params: SessionConfig, party: int):
    if party == 1:
        return tcp_listen(params.host, params.peer_port, timeout=60.0)
    return tcp_connect(params.host, params.peer_port, timeout=60.0)


def _material_for(params: SessionConfig, party: PartyId, base: str):
    path = os.path.join(base, "material", f"material_p{int(party)}.astm")
    if os.path.exists(path):
        return MaterialStream.from_file(path, params.fixed_point())
    counts = provision_counts(params)
    return MaterialStream.lazy(party, params.dealer_seed, params.fixed_point(), counts)


# -- commands ----------------------------------------------------------------


def cmd_dealer_gen(args) -> int:
    params = SessionConfig.load(args.config)
    counts = provision_counts(params)
    for key, value in (("triple", args.triples), ("cmp", args.cmp), ("sort", args.sort)):
        if value is not None:
            counts[key] = value
    os.makedirs(args.out, exist_ok=True)
    paths = generate_material_files(params.dealer_seed, counts, args.out,
                                    params.fixed_point())
    for path in paths:
        print(f"wrote {path} ({os.path.getsize(path)} bytes)")
    return E.EXIT_OK


def cmd_owner_outsource(args) -> int:
    params = SessionConfig.load(args.config)
    cfg = params.fixed_point()
    images, labels = make_corpus(params.n_images, params.n_classes,
                                 params.image_size, params.owner_seed)
    ids = list(range(params.n_images))
    store1, store2 = outsource(images, ids, params.owner_seed, cfg)
    model = make_demo_model(params.model_seed, widths=params.model_widths,
                            input_hw=params.image_size)
    for party, store in ((1, store1), (2, store2)):
        base = _party_dir(args.data_dir, party)
        _ensure_dirs(base)
        for image_id, values in store.images.items():
            write_share_file(os.path.join(base, "shares", f"img_{image_id:05d}.share"),
                             Share(store.party, values))
        save_model(model, os.path.join(base, "model.json"),
                   os.path.join(base, "model.bin"))
    print(f"outsourced {params.n_images} images "
          f"({params.n_classes} classes) to {args.data_dir}")
    return E.EXIT_OK


def cmd_server_run(args) -> int:
    params = SessionConfig.load(args.config)
    cfg = params.fixed_point()
    party = PartyId(args.party)
    base = _party_dir(args.data_dir, args.party)
    chan = _open_peer_channel(params, args.party)
    try:
        sess = PartySession(party, chan, _material_for(params, party, base), cfg,
                            params.party_seed(party))
        sess.handshake(params.to_text())
        store = _load_store(base, party)
        model = load_model(os.path.join(base, "model.json"),
                           os.path.join(base, "model.bin"))
        log = DecisionLog()
        stages = StageMeter(sess.meter)
        decisions_path = os.path.join(base, "decisions.json")
        if args.mode == "serve":
            # continue the build-phase records so equivalence sees one log
            if os.path.exists(decisions_path):
                with open(decisions_path) as fh:
                    log = DecisionLog.from_json(fh.read())
            meter_path = os.path.join(base, "meter.csv")
            if os.path.exists(meter_path):
                with open(meter_path, newline="") as fh:
                    for row in csv.DictReader(fh):
                        stages.rows.append((row["stage"], row["protocol_tag"],
                                            int(row["rounds"]), int(row["bytes"])))
        if args.mode == "build":
            built = build_party(sess, store, model, params, log, stages)
            _save_built(base, party, built)
            stages.write_csv(os.path.join(base, "meter.csv"))
            with open(os.path.join(base, "decisions.json"), "w") as fh:
                fh.write(log.to_json())
            print(f"server {args.party}: build complete "
                  f"({len(store.images)} images, {params.index_kind})")
        else:
            built = _load_built(base, params, store)
            _serve_queries(args, params, cfg, sess, store, built, model, log, stages, base)
        return E.EXIT_OK
    finally:
        chan.close()


def _save_built(base: str, party: PartyId, built: BuiltIndex) -> None:
    idx_dir = os.path.join(base, "index")
    write_share_file(os.path.join(idx_dir, "features.share"),
                     Share(party, built.features))
    write_share_file(os.path.join(idx_dir, "proj.share"), Share(party, built.proj))
    if built.pca_state is not None:
        built.pca_state.save(os.path.join(idx_dir, "pca.state"), party)
    if built.hkm is not None:
        save_hkm(os.path.join(idx_dir, "hkm.idx"), party, built.hkm)
    if built.lsh is not None:
        save_lsh(os.path.join(idx_dir, "lsh.idx"), party, built.lsh)


def _load_built(base: str, params: SessionConfig, store: ShareStore) -> BuiltIndex:
    idx_dir = os.path.join(base, "index")
    features = read_share_file(os.path.join(idx_dir, "features.share")).values
    proj = read_share_file(os.path.join(idx_dir, "proj.share")).values
    state = None
    if os.path.exists(os.path.join(idx_dir, "pca.state")):
        state, _ = PcaState.load(os.path.join(idx_dir, "pca.state"))
    built = BuiltIndex(params.index_kind, np.asarray(store.ids, dtype=np.int64),
                       features, proj, state)
    if params.index_kind == "hkm":
        built.hkm, _ = load_hkm(os.path.join(idx_dir, "hkm.idx"))
    elif params.index_kind == "c2lsh":
        built.lsh, _ = load_lsh(os.path.join(idx_dir, "lsh.idx"))
    return built


def _serve_queries(args, params, cfg, sess, store, built, model, log, stages, base) -> None:
    port = params.user_port_1 if args.party == 1 else params.user_port_2
    for _ in range(args.serve_count):
        user_chan = tcp_listen(params.host, port, timeout=60.0)
        try:
            header = np.frombuffer(user_chan.recv(expect_tag=TAG_RAW).payload,
                                   dtype="<i8")
            m, query_index = int(header[0]), int(header[1])
            shape = tuple(int(v) for v in header[2:])
            payload = user_chan.recv(expect_tag=TAG_RAW).payload
            q_share = np.frombuffer(payload, dtype="<f8").reshape(shape)
            top, shares = query_party(sess, store, built, model, q_share, m,
                                      params, f"q{query_index}", log, stages)
            user_chan.send(TAG_RAW, np.asarray(top, dtype="<i8").tobytes())
            for values in shares:
                user_chan.send(TAG_RAW, np.ascontiguousarray(values, "<f8").tobytes())
        finally:
            user_chan.close()
    stages.write_csv(os.path.join(base, "meter.csv"))
    with open(os.path.join(base, "decisions.json"), "w") as fh:
        fh.write(log.to_json())
    print(f"server {args.party}: served {args.serve_count} queries")


def cmd_user_query(args) -> int:
    params = SessionConfig.load(args.config)
    cfg = params.fixed_point()
    queries, _ = make_queries(args.query_index + 1, params.n_classes,
                              params.image_size, params.owner_seed,
                              params.query_seed)
    image = queries[args.query_index]
    s1, s2 = make_trapdoor(image, params.query_seed + 100 + args.query_index, cfg)
    m = args.m if args.m else params.m
    shape = np.asarray(image.shape, dtype="<i8")
    replies = []
    chans = []
    try:
        for party, share in ((1, s1), (2, s2)):
            port = params.user_port_1 if party == 1 else params.user_port_2
            chan = tcp_connect(params.host, port, timeout=60.0)
            chans.append(chan)
            header = np.concatenate([[m, args.query_index], shape]).astype("<i8")
            chan.send(TAG_RAW, header.tobytes())
            chan.send(TAG_RAW, np.ascontiguousarray(share.values, "<f8").tobytes())
        for chan in chans:
            ids = np.frombuffer(chan.recv(expect_tag=TAG_RAW).payload, dtype="<i8")
            shares = [np.frombuffer(chan.recv(expect_tag=TAG_RAW).payload,
                                    dtype="<f8").reshape(image.shape)
                      for _ in ids]
            replies.append((ids.tolist(), shares))
    finally:
        for chan in chans:
            chan.close()
    ids1, shares1 = replies[0]
    ids2, shares2 = replies[1]
    if ids1 != ids2:
        print(f"servers disagree on ranking: {ids1} vs {ids2}", file=sys.stderr)
        return E.EXIT_EQUIVALENCE
    results = decrypt_result(shares1, shares2, cfg)
    os.makedirs(args.out, exist_ok=True)
    for image_id, img in zip(ids1, results):
        np.save(os.path.join(args.out, f"result_{image_id:05d}.npy"), img)
    print(f"query {args.query_index}: top-{m} ids {ids1}")
    return E.EXIT_OK


def cmd_oracle_run(args) -> int:
    params = SessionConfig.load(args.config)
    images, _ = make_corpus(params.n_images, params.n_classes,
                            params.image_size, params.owner_seed)
    ids = list(range(params.n_images))
    model = make_demo_model(params.model_seed, widths=params.model_widths,
                            input_hw=params.image_size)
    pipeline = PlaintextPipeline(images, ids, model, params)
    queries, _ = make_queries(args.queries, params.n_classes, params.image_size,
                              params.owner_seed, params.query_seed)
    for qi, image in enumerate(queries):
        top = pipeline.query(image, params.m, f"q{qi}")
        print(f"oracle q{qi}: top-{params.m} ids {top}")
    with open(args.out, "w") as fh:
        fh.write(pipeline.log.to_json())
    print(f"wrote {args.out}")
    return E.EXIT_OK


def cmd_meter_report(args) -> int:
    path = os.path.join(_party_dir(args.data_dir, args.party), "meter.csv")
    if not os.path.exists(path):
        print(f"no meter file at {path}", file=sys.stderr)
        return E.EXIT_CONFIG
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    print(f"{'stage':<12} {'protocol':<14} {'rounds':>7} {'bytes':>10} {'bits/l':>10}")
    totals = {}
    for row in rows:
        bytes_ = int(row["bytes"])
        print(f"{row['stage']:<12} {row['protocol_tag']:<14} "
              f"{row['rounds']:>7} {bytes_:>10} {bytes_ * 8 // 64:>10}")
        key = row["stage"]
        rounds, total = totals.get(key, (0, 0))
        totals[key] = (rounds + int(row["rounds"]), total + bytes_)
    print("-" * 56)
    for stage, (rounds, bytes_) in totals.items():
        print(f"{stage:<12} {'TOTAL':<14} {rounds:>7} {bytes_:>10} {bytes_ * 8 // 64:>10}")
    return E.EXIT_OK


def cmd_verify_equivalence(args) -> int:
    with open(args.secure) as fh:
        secure = DecisionLog.from_json(fh.read())
    with open(args.oracle) as fh:
        oracle = DecisionLog.from_json(fh.read())
    logs = [("secure-vs-oracle", secure, oracle)]
    if args.secure2:
        with open(args.secure2) as fh:
            secure2 = DecisionLog.from_json(fh.read())
        logs.append(("party1-vs-party2", secure, secure2))
    failed = False
    for name, a, b in logs:
        problems = a.diff(b)
        stages = sorted({key.split(":", 1)[0] for key, _ in a.entries}
                        | {key.split(":", 1)[0] for key, _ in b.entries})
        bad_prefixes = {s for s in stages if any(s in p for p in problems)}
        for stage in stages:
            status = "FAIL" if stage in bad_prefixes else "PASS"
            print(f"{name} {stage}: {status}")
        if problems:
            failed = True
            for p in problems[:10]:
                print(f"  {p[:160]}", file=sys.stderr)
    return E.EXIT_EQUIVALENCE if failed else E.EXIT_OK


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"count must be >= 1, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="secir", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dealer-gen", help="generate correlated-randomness files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--triples", type=_positive_int)
    p.add_argument("--cmp", type=_positive_int)
    p.add_argument("--sort", type=_positive_int)
    p.set_defaults(fn=cmd_dealer_gen)

    p = sub.add_parser("owner-outsource", help="split the corpus into share stores")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", required=True)
    p.set_defaults(fn=cmd_owner_outsource)

    p = sub.add_parser("server-run", help="run one compute server")
    p.add_argument("--config", required=True)
    p.add_argument("--party", type=int, choices=(1, 2), required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--mode", choices=("build", "serve"), default="build")
    p.add_argument("--serve-count", type=int, default=1)
    p.set_defaults(fn=cmd_server_run)

    p = sub.add_parser("user-query", help="send a trapdoor and decrypt results")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--query-index", type=int, default=0)
    p.add_argument("--m", type=int)
    p.set_defaults(fn=cmd_user_query)

    p = sub.add_parser("oracle-run", help="plaintext pipeline with identical seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--queries", type=int, default=1)
    p.set_defaults(fn=cmd_oracle_run)

    p = sub.add_parser("meter-report", help="print per-stage rounds and bytes")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--party", type=int, choices=(1, 2), default=1)
    p.set_defaults(fn=cmd_meter_report)

    p = sub.add_parser("verify-equivalence", help="diff secure vs oracle decisions")
    p.add_argument("--secure", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--secure2")
    p.set_defaults(fn=cmd_verify_equivalence)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return E.EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, ConfigMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return E.EXIT_CONFIG
    except ProtocolViolation as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return E.EXIT_PROTOCOL
    except MaterialExhausted as exc:
        print(f"material exhausted: {exc}", file=sys.stderr)
        return E.EXIT_MATERIAL


if __name__ == "__main__":
    sys.exit(main())
