"""``blockattn`` command-line entry point.

Data goes to stdout, diagnostics to stderr. Exit status is 0 only when no
check failed and no error was raised.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, tensor
from .engine import MODES, decode_greedy, prefill, ttft_sweep
from .flops import (BLOCK_MODES, COUNTINGS, TABLE2_LENGTHS, flops_block, flops_vanilla,
                    table2_csv, table2_deviations, table2_report)
from .kvcache import CacheError, CacheStats, KVCache, read_cache_file
from .model import PROFILES, ModelConfig, Weights, detokenize, init_weights, load_weights, profile
from .ragsim import SimReport, SimulationError, load_corpus, run_sim, synth_queries
from .verify import run_suite

log = logging.getLogger("blockattn")

DEFAULT_CAPACITY = 256 << 20
CACHE_ENV = "BLOCKATTN_CACHE"


class CLIError(Exception):
    pass


def default_cache_path() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    base = os.environ.get("XDG_CACHE_HOME") or Path.home() / ".cache"
    return Path(base) / "blockattn" / "kv.bkv"


def _config(args, default_profile: str = "toy") -> ModelConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CLIError(f"config file {path} does not exist")
        return ModelConfig.from_file(path)
    return profile(args.profile or default_profile)


def _weights(args, config: ModelConfig) -> Weights:
    if args.weights:
        if not Path(args.weights).exists():
            raise CLIError(f"weights file {args.weights} does not exist")
        return load_weights(args.weights, config)
    if config == PROFILES["llama3-8b-shape"]:
        raise CLIError("llama3-8b-shape is a shape-only profile for FLOPs accounting; "
                       "pick --profile toy or pass --config")
    return init_weights(config, args.seed)


def _cache_path(args) -> Path:
    return Path(args.cache) if args.cache else default_cache_path()


def _open_cache(args, w: Weights) -> tuple[KVCache, Path]:
    path = _cache_path(args)
    cache = KVCache.for_weights(w, args.capacity)
    if path.exists():
        cache.load(path)
    return cache, path


def _csv_writer(out):
    return csv.writer(out, lineterminator="\n")


def cmd_verify(args) -> int:
    config = _config(args)
    cache = None
    if args.cache:
        if not Path(args.cache).exists():
            raise CLIError(f"cache file {args.cache} does not exist")
        cache, _ = _open_cache(args, _weights(args, config))
    results = run_suite(config, args.seed, trials=args.trials,
                        no_pos_reencode=args.no_pos_reencode, cache=cache, max_len=args.max_len)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"verify: {len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"verify: all {len(results)} checks passed (backend={tensor.backend()})",
          file=sys.stderr)
    return 0


def cmd_flops(args) -> int:
    config = _config(args, default_profile="llama3-8b-shape")
    out = sys.stdout
    if args.table2:
        rows = table2_report(config, mode=args.mode, counting=args.counting,
                             user_len=args.user_len)
        out.write(table2_csv(rows))
        if args.assert_:
            problems = table2_deviations(rows)
            for p in problems:
                print(f"flops: {p}", file=sys.stderr)
            return 1 if problems else 0
        return 0
    lengths = args.lengths or list(TABLE2_LENGTHS)
    out.write("# blockattn flops v1\n")
    w = _csv_writer(out)
    w.writerow(["prompt_len", "final_len", "vanilla", "block", "reduction"])
    for n in lengths:
        final = min(args.user_len, n)
        van = flops_vanilla(config, n, args.counting).total_flops
        blk = flops_block(config, final, n - final, args.mode, args.counting).total_flops
        w.writerow([n, final, van, blk, f"{100 * (1 - blk / van):.2f}"])
    return 0


def cmd_bench(args) -> int:
    config = _config(args)
    w = _weights(args, config)
    out = sys.stdout
    out.write("# blockattn bench v1\n")
    writer = _csv_writer(out)
    writer.writerow(["length", "ttft_vanilla_ms", "ttft_block_ms", "ratio",
                     "flops_vanilla", "flops_block"])
    for row in ttft_sweep(args.lengths, w, user_len=args.user_len, repeats=args.repeats,
                          passage_len=args.passage_len, seed=args.seed,
                          capacity=args.capacity):
        final = min(args.user_len, row.length)
        fv = flops_vanilla(config, row.length, args.counting).total_flops
        fb = flops_block(config, final, row.length - final, args.mode, args.counting).total_flops
        writer.writerow([row.length, f"{1000 * row.vanilla.median:.3f}",
                         f"{1000 * row.block.median:.3f}", f"{row.ratio:.4f}", fv, fb])
        out.flush()
    return 0


def _read_prompt(value: str) -> str:
    if not value.lstrip().startswith("{") and Path(value).exists():
        return Path(value).read_text()
    return value


def cmd_gen(args) -> int:
    from .blocks import parse_prompt_json

    text = _read_prompt(args.prompt)
    try:
        layout = parse_prompt_json(text, merge_instruction=args.merge_instruction)
    except json.JSONDecodeError as exc:
        raise CLIError(f"malformed prompt JSON at line {exc.lineno} column {exc.colno} "
                       f"(char {exc.pos}): {exc.msg}") from None
    config = _config(args)
    w = _weights(args, config)
    cache, path = (None, None)
    if args.mode == "block":
        cache, path = _open_cache(args, w)
    res = prefill(layout, args.mode, w, cache, not args.no_pos_reencode)
    tokens = decode_greedy(res, layout.total_len, args.max_new, w)
    if cache is not None:
        cache.save(path)
    print(detokenize(tokens))
    print(f"tokens={tokens}")
    print(f"blocks={len(layout.blocks)} blocks_reused={res.blocks_reused} "
          f"prefill_ms={1000 * res.timing:.3f}")
    return 0


def cmd_cache(args) -> int:
    path = _cache_path(args)
    config = _config(args)
    if args.action == "purge":
        if not args.yes:
            raise CLIError("refusing to purge without --yes")
        if path.exists():
            path.write_bytes(b"")
        print(f"purged {path}")
        return 0
    if not path.exists():
        print(f"path={path}\nentries=0\nbytes=0\nhit_rate=0.0000 (0/0)")
        return 0
    parsed = read_cache_file(path, config)
    lookups, hits, evictions = parsed.lifetime
    rate = hits / lookups if lookups else 0.0
    print(f"path={path}")
    print(f"entries={len(parsed.entries)}")
    print(f"bytes={parsed.payload_bytes}")
    print(f"file_bytes={parsed.nbytes}")
    print(f"hit_rate={rate:.4f} ({hits}/{lookups})")
    print(f"evictions={evictions}")
    if parsed.weights_fingerprint:
        print(f"weights_fingerprint={parsed.weights_fingerprint.hex()}")
    return 0


def cmd_sim(args) -> int:
    config = _config(args)
    corpus = load_corpus(args.corpus)
    w = _weights(args, config)
    stream = synth_queries(corpus, args.queries, args.k, args.zipf, args.seed)
    if len(stream) == 0:
        report = SimReport(0, 0.0, 0, 0, 0, 0, [], CacheStats())
    else:
        report = run_sim(corpus, stream, config, w, args.capacity, seed=args.seed,
                         sample_rate=args.sample_rate)
    out = Path(args.out)
    json_path = out if out.suffix == ".json" else out.with_suffix(".json")
    csv_path = json_path.with_name(json_path.stem + "_ttft.csv")
    json_path.parent.mkdir(parents=True, exist_ok=True)
    report.write(json_path, csv_path)
    print(f"queries={report.n_queries} hit_rate={report.hit_rate:.4f} "
          f"flops_saved={report.flops_saved:.6e} "
          f"flops_vanilla={report.flops_vanilla_total:.6e} "
          f"flops_block={report.flops_block_total:.6e} "
          f"sample_max_diff={report.sample_max_abs_diff:.3e}")
    print(f"wrote {json_path} and {csv_path}", file=sys.stderr)
    if not report.sample_passed:
        print("sim: correctness sample exceeded tolerance", file=sys.stderr)
        return 1
    return 0


def cmd_init_weights(args) -> int:
    config = _config(args)
    w = init_weights(config, args.seed)
    w.save(args.out)
    print(f"wrote {args.out} fingerprint={w.fingerprint.hex()}")
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _size(text: str) -> int:
    units = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}
    t = text.strip().lower().rstrip("b")
    mult = units.get(t[-1:], 1)
    if t[-1:] in units:
        t = t[:-1]
    try:
        value = int(float(t) * mult)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("size must be non-negative")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", choices=sorted(PROFILES),
                        help="model profile (default: toy; llama3-8b-shape for flops)")
    common.add_argument("--config", help="model config JSON (overrides --profile)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--weights", help="BAW1 weights file (default: seeded random init)")
    common.add_argument("--cache", help=f"BKV1 cache file (env {CACHE_ENV})")
    common.add_argument("--capacity", type=_size, default=DEFAULT_CAPACITY,
                        help="cache capacity in bytes, accepts k/m/g suffixes")
    common.add_argument("--no-pos-reencode", action="store_true",
                        help="keep cached keys at their zero-based positions")
    common.add_argument("--backend", choices=("auto",) + tensor.BACKENDS, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="blockattn", description="Block-attention inference engine")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--max-len", type=int, default=1024)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("flops", parents=[common], help="analytic FLOPs to first token")
    s.add_argument("--table2", action="store_true", help="the 8-row long-context table")
    s.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit 1 if --table2 deviates from the published values")
    s.add_argument("--mode", choices=BLOCK_MODES, default="paper")
    s.add_argument("--counting", choices=COUNTINGS, default="linear")
    s.add_argument("--user-len", type=int, default=50)
    s.add_argument("--lengths", type=_int_list)
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("bench", parents=[common], help="measured TTFT, vanilla vs block")
    s.add_argument("--lengths", type=_int_list, default=[512, 1024, 2048, 4096, 8192])
    s.add_argument("--user-len", type=int, default=50)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--passage-len", type=int, default=256)
    s.add_argument("--mode", choices=BLOCK_MODES, default="exact", help="FLOPs column mode")
    s.add_argument("--counting", choices=COUNTINGS, default="full", help="FLOPs column counting")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gen", parents=[common], help="greedy generation from a JSON prompt")
    s.add_argument("--prompt", required=True, help="JSON string or path to a JSON file")
    s.add_argument("--max-new", type=int, default=16)
    s.add_argument("--mode", choices=MODES, default="block")
    s.add_argument("--merge-instruction", action="store_true",
                   help="prefix the instruction to the query instead of caching it")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("cache", parents=[common], help="inspect or purge the KV cache file")
    s.add_argument("action", choices=("stats", "purge"))
    s.add_argument("--yes", action="store_true", help="confirm purge")
    s.set_defaults(func=cmd_cache)

    s = sub.add_parser("sim", parents=[common], help="Zipf RAG workload simulation")
    s.add_argument("--corpus", required=True, help="JSONL corpus of {id, text}")
    s.add_argument("--queries", type=int, default=1000)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--zipf", type=float, default=1.1)
    s.add_argument("--sample-rate", type=float, default=0.01)
    s.add_argument("--out", default="sim_report.json")
    s.set_defaults(func=cmd_sim)

    s = sub.add_parser("init-weights", parents=[common], help="write seeded weights as BAW1")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_weights)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.backend and args.backend != "auto":
            tensor.set_backend(args.backend)
        return args.func(args)
    except (CLIError, CacheError, SimulationError, ValueError, OSError) as exc:
        print(f"blockattn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
