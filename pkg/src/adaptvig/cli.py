"""``adaptvig`` command line: generate, train, analyze-graph, grad-check,
heatmap and bench. Every command writes only under ``--out-dir``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import agc, graph, gradcheck, training
from . import tensor as T

log = logging.getLogger("adaptvig")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows([_fmt(v) for v in row] for row in rows)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    images, labels = training.synthetic_blobs(args.seed, args.n_samples, args.classes, args.h, args.w, args.channels)
    img, lab = training.write_dataset(_out_dir(args), images, labels)
    print(f"wrote {img} and {lab}")
    return 0


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg_dict = dict(args.train_config or {})
    for key, val in (
        ("seed", args.seed),
        ("steps", args.steps),
        ("learning_rate", args.learning_rate),
        ("momentum", args.momentum),
        ("batch_size", args.batch_size),
    ):
        if val is not None:
            cfg_dict[key] = val
    if args.data:
        cfg_dict.update(dataset="tensor_file", data_path=args.data)
    cfg = training.TrainConfig.from_dict(cfg_dict)
    images, labels = cfg.load_data()
    try:
        result = training.train(cfg, images, labels)
    except training.NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    paths = training.write_run(_out_dir(args), cfg, result)
    first, last = result.initial, result.final
    print(f"loss {first['loss']:.6g} -> {last['loss']:.6g}, accuracy {last['accuracy']:.4f}")
    print("T: " + ", ".join(f"{t:.6f}" for t in result.temperatures()))
    print(f"artifacts in {paths['metrics'].parent}")
    return 0


# --------------------------------------------------------------------------
# analyze-graph

GRAPH_HEADER = ["method", "h", "w", "k_or_knn", "tau", "C", "lambda1", "lambda2", "S", "n_nodes", "n_edges", "eigen_solver"]


def analyze_one(job: dict) -> list:
    mode = job["mode"]
    if mode == "scaffold":
        a = graph.build_scaffold_graph(job["h"], job["w"], job["k"])
        k_or_knn, tau = job["k"], ""
    elif mode == "gated":
        a = graph.build_gated_graph(job["x"], job["k"], job["T"], job["tau"])
        k_or_knn, tau = job["k"], job["tau"]
    else:
        a = graph.build_knn_graph(job["x"], job["knn"])
        k_or_knn, tau = job["knn"], ""
    m = graph.spectral_gap(a, job["eigen"])
    return [mode, a.h, a.w, k_or_knn, tau, m.clustering, m.lambda1, m.lambda2, m.spectral_gap, a.n_nodes, a.n_edges, m.method]


def graph_jobs(args) -> list[dict]:
    base = {"mode": args.mode, "k": args.k, "tau": args.tau, "T": args.T, "knn": args.knn, "eigen": args.eigen}
    if args.mode == "scaffold":
        sizes = args.sizes or [args.h]
        return [dict(base, h=s, w=s if args.sizes else args.w) for s in sizes]
    if not args.input:
        raise ValueError(f"mode {args.mode!r} needs --input tensor file")
    x = T.load_tensor(args.input)
    taus = args.taus or [args.tau]
    if args.mode == "gated":
        return [dict(base, x=x, tau=t) for t in taus]
    return [dict(base, x=x)]


def cmd_analyze_graph(args) -> int:
    jobs = graph_jobs(args)
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            rows = list(pool.map(analyze_one, jobs))
    else:
        rows = [analyze_one(j) for j in jobs]
    path = _out_dir(args) / "graph_metrics.csv"
    write_csv(path, GRAPH_HEADER, rows)
    for r in rows:
        print(f"{r[0]} {r[1]}x{r[2]}: C={r[5]:.6f} S={r[8]:.6f}")
    print(f"wrote {path}")
    return 0


# --------------------------------------------------------------------------
# grad-check


def cmd_grad_check(args) -> int:
    results = gradcheck.run_grad_check(args.seed)
    print(gradcheck.format_report(results))
    rows = [[r.component, r.max_rel_error, r.tolerance, "PASS" if r.passed else "FAIL"] for r in results]
    write_csv(_out_dir(args) / "grad_check.csv", ["component", "max_rel_error", "tolerance", "status"], rows)
    failed = [r.component for r in results if not r.passed]
    if failed:
        sys.stdout.flush()
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------
# heatmap


def write_pgm(path: Path, img: np.ndarray) -> None:
    """Binary (P5) 8-bit PGM, linear scale with 1.0 -> 255."""
    levels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = levels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, data = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def cmd_heatmap(args) -> int:
    x = T.load_tensor(args.input)
    hm = agc.gate_heatmap(x, (args.ref_row, args.ref_col), args.T)
    out = _out_dir(args)
    write_pgm(out / "heatmap.pgm", hm)
    write_csv(out / "heatmap.csv", ["row", "col", "gate"], [[r, c, hm[r, c]] for r in range(hm.shape[0]) for c in range(hm.shape[1])])
    print(f"wrote {out / 'heatmap.pgm'} and {out / 'heatmap.csv'}")
    return 0


# --------------------------------------------------------------------------
# bench


def bench_size(h: int, w: int, channels: int, k: int, seed: int, repeats: int) -> tuple[int, float]:
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.standard_normal((1, channels, h, w)))
    cfg = agc.AGCConfig(k)
    params = agc.GatingParams(1.0)
    stats: dict = {}
    agc.agc_aggregate(x, cfg, params, stats)
    count = stats["steps"]
    expected = agc.shift_count(h, w)
    if count != expected:
        raise AssertionError(f"{h}x{w}: {count} aggregation steps, expected {expected}")
    t0 = time.perf_counter()
    for _ in range(repeats):
        agc.agc_aggregate(x, cfg, params)
    return count, (time.perf_counter() - t0) / repeats


def cmd_bench(args) -> int:
    rows = []
    for s in args.sizes:
        count, wall = bench_size(s, s, args.channels, args.k, args.seed, args.repeats)
        rows.append([s, s, count, wall])
        print(f"{s}x{s}: shift_count={count} wall_time={wall:.6f}s")
    path = _out_dir(args) / "bench.csv"
    write_csv(path, ["h", "w", "shift_count", "wall_time"], rows)
    print(f"wrote {path}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    common.add_argument("--out-dir", default="out", help="directory for every output file")
    common.add_argument("--config", help="JSON file whose keys supply argument defaults")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adaptvig", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic blob dataset")
    g.add_argument("--n-samples", type=int, default=200)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--h", type=int, default=16)
    g.add_argument("--w", type=int, default=16)
    g.add_argument("--channels", type=int, default=3)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train the toy model with SGD + momentum")
    t.add_argument("--data", help="images.avgt (labels.csv beside it); default: synthetic blobs")
    t.add_argument("--steps", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--batch-size", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze-graph", parents=[common], help="clustering coefficient and spectral gap")
    a.add_argument("--mode", choices=["scaffold", "gated", "knn"], default="scaffold")
    a.add_argument("--h", type=int, default=14)
    a.add_argument("--w", type=int, default=14)
    a.add_argument("--sizes", type=int, nargs="+", help="sweep square grids (scaffold mode)")
    a.add_argument("--k", type=int, default=2)
    a.add_argument("--tau", type=float, default=0.5)
    a.add_argument("--taus", type=float, nargs="+", help="sweep thresholds (gated mode)")
    a.add_argument("--T", type=float, default=1.0, help="gate temperature")
    a.add_argument("--knn", type=int, default=9)
    a.add_argument("--input", help="AVGT feature tensor (gated and knn modes)")
    a.add_argument("--eigen", choices=["auto", "dense", "power"], default="auto")
    a.add_argument("--workers", type=int, default=1, help="processes for sweeps")
    a.set_defaults(func=cmd_analyze_graph)

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference audit; nonzero exit on breach")
    c.set_defaults(func=cmd_grad_check)

    h = sub.add_parser("heatmap", parents=[common], help="gate strength from one reference pixel")
    h.add_argument("--input", required=True)
    h.add_argument("--ref-row", type=int, required=True)
    h.add_argument("--ref-col", type=int, required=True)
    h.add_argument("--T", type=float, default=1.0)
    h.set_defaults(func=cmd_heatmap)

    b = sub.add_parser("bench", parents=[common], help="shift counts and AGC forward time per grid size")
    b.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 32, 64])
    b.add_argument("--channels", type=int, default=16)
    b.add_argument("--k", type=int, default=1)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


SEED_DEFAULTS = {"train": None, "grad-check": gradcheck.DEFAULT_SEED}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.train_config = None
    if args.config:
        loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(loaded, dict):
            raise ValueError("--config must hold a JSON object")
        if args.command == "train":
            args.train_config = loaded
        else:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            dests = {a.dest for a in sub._actions}
            unknown = {k.replace("-", "_") for k in loaded} - dests
            if unknown:
                raise ValueError(f"unknown config keys for {args.command}: {sorted(unknown)}")
            sub.set_defaults(**{k.replace("-", "_"): v for k, v in loaded.items()})
            args = parser.parse_args(argv)
            args.train_config = None
    if args.seed is None:
        args.seed = SEED_DEFAULTS.get(args.command, 0)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
