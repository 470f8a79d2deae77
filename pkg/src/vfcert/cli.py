"""Command-line front end: ``vfcert {bounds,certify,attack,coverage}``.

Per-image results are written as JSON lines (``certify``, ``attack``,
``coverage``) or one JSON file per image (``bounds``); a one-line JSON
summary goes to stdout and a log line per image to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .errors import VfcertError
from .geometry import AttackBudget, bounds_map, parse_gamma, parse_norm
from .imaging import load_dataset, load_idx_labels

log = logging.getLogger("vfcert")

THREADS_ENV = "VFCERT_THREADS"


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parse_range(text: str | None, count: int) -> list[int]:
    """``"a..b"`` (inclusive), ``"a"``, or everything when ``None``."""
    if text is None:
        return list(range(count))
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a or 0), int(b) if b else count - 1
    else:
        lo = hi = int(text)
    if lo < 0 or hi >= count or lo > hi:
        raise argparse.ArgumentTypeError(f"image range {text!r} is outside 0..{count - 1}")
    return list(range(lo, hi + 1))


@dataclass
class RunConfig:
    command: str
    dataset: str | None = None
    format: str | None = None
    network: str | None = None
    norm: float = math.inf
    delta: float = 0.0
    gamma: float = math.inf
    method: str = "deeppoly"
    timeout: float | None = None
    images: str | None = None
    output: str | None = None
    seed: int = 0
    threads: int = 1
    samples: int = 10_000
    labels: str | None = None
    relaxation: str | None = None
    planes: bool = False

    @property
    def budget(self) -> AttackBudget:
        return AttackBudget(self.norm, self.delta, self.gamma)

    def validate(self):
        if self.delta < 0:
            raise VfcertError("--delta must be >= 0")
        if not self.gamma > 0:
            raise VfcertError("--gamma must be > 0 (use 'inf' for no flow bound)")
        need = {"bounds": ("dataset", "output"), "certify": ("network", "output"),
                "attack": ("network", "dataset", "output"), "coverage": ("dataset", "output")}[self.command]
        for name in need:
            if getattr(self, name) is None:
                raise VfcertError(f"{self.command} needs --{name}")
        if self.command == "certify" and (self.dataset is None) == (self.relaxation is None):
            raise VfcertError("certify needs exactly one of --dataset or --relaxation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vfcert", description="Certify and test robustness against vector-field deformations.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, network=False, dataset=True):
        if dataset:
            p.add_argument("--dataset", help="image file (IDX, optionally .gz, or tensor JSON)")
            p.add_argument("--format", choices=("idx", "tensor-json"), help="dataset format (default: by extension)")
            p.add_argument("--images", help="index range a..b (inclusive) or a single index")
        if network:
            p.add_argument("--network", help="network JSON")
        p.add_argument("--norm", type=parse_norm, default=math.inf, help="1, 2 or inf")
        p.add_argument("--delta", type=float, required=True)
        p.add_argument("--gamma", type=parse_gamma, default=math.inf, help="flow bound or 'inf'")
        p.add_argument("--output", required=True)
        p.add_argument("--threads", type=int, default=None, help=f"worker processes (default: ${THREADS_ENV} or CPU count)")

    p = sub.add_parser("bounds", help="per-pixel interval bounds (and optionally bounding planes)")
    common(p)
    p.add_argument("--planes", action="store_true", help="also write bounding planes")

    p = sub.add_parser("certify", help="certify images with a verifier")
    common(p, network=True)
    p.add_argument("--method", choices=("interval", "deeppoly", "milp", "deeppoly+flow", "milp+flow"), default="deeppoly")
    p.add_argument("--timeout", type=float, default=None, help="MILP seconds per image")
    p.add_argument("--labels", help="IDX label file; default is the clean prediction")
    p.add_argument("--relaxation", help="explicit input-region JSON instead of --dataset")

    p = sub.add_parser("attack", help="random admissible-field attack")
    common(p, network=True)
    p.add_argument("--samples", type=int, default=1000, help="tries per image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels", help="IDX label file; default is the clean prediction")

    p = sub.add_parser("coverage", help="sampled coverage of the certified intervals")
    common(p)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def config_from_args(args) -> RunConfig:
    fields = RunConfig.__dataclass_fields__
    cfg = RunConfig(**{k: v for k, v in vars(args).items() if k in fields and v is not None})
    if args.threads is None:
        cfg.threads = default_threads()
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# per-image work units (top level so they pickle)
# --------------------------------------------------------------------------

def _bounds_unit(cfg: RunConfig, idx, image):
    from .relaxation import planes_map

    start = time.perf_counter()
    try:
        bounds = bounds_map(image, cfg.budget)
        elapsed = time.perf_counter() - start
        out = Path(cfg.output)
        with open(out / f"bounds_{idx}.json", "w") as fh:
            json.dump(bounds.to_json(), fh)
        if cfg.planes:
            planes_map(image, cfg.delta).save(out / f"planes_{idx}.json")
    except (VfcertError, OSError) as exc:
        return {"image": idx, "status": "error", "error": str(exc), "time_s": time.perf_counter() - start}
    return {"image": idx, "status": "ok", "time_s": elapsed}


def _certify_unit(cfg: RunConfig, idx, image, network, label):
    from .verifier import certify_image

    try:
        rep = certify_image(network, image, cfg.budget, cfg.method, cfg.timeout, label=label, image_id=idx)
        return rep.to_json()
    except VfcertError as exc:
        return {"image": idx, "status": "error", "error": str(exc)}


def _attack_unit(cfg: RunConfig, idx, image, network, label):
    from .oracle import random_attack
    from .verifier import predict

    start = time.perf_counter()
    clean = predict(network, image)
    label = clean if label is None else label
    found = random_attack(network, image, cfg.budget, label, cfg.samples, cfg.seed)
    out = {"image": idx, "label": label, "predicted": clean, "tries": cfg.samples, "seed": cfg.seed,
           "found": found is not None, "time_s": time.perf_counter() - start}
    if found is not None:
        fld, adv, k = found
        out.update({"adversarial_label": adv, "sample": k, "witness": fld.to_json()})
    return out


def _coverage_unit(cfg: RunConfig, idx, image):
    from .oracle import estimate_coverage

    start = time.perf_counter()
    rep = estimate_coverage(image, cfg.budget, cfg.samples, cfg.seed)
    out = {"image": idx, "seed": cfg.seed}
    out.update(rep.to_json())
    out["time_s"] = time.perf_counter() - start
    return out


def _map(cfg: RunConfig, fn, jobs):
    """Run ``fn(*job)`` for all jobs, results in input order."""
    if cfg.threads <= 1 or len(jobs) <= 1:
        for job in jobs:
            yield fn(*job)
        return
    with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        for fut in futures:
            yield fut.result()


def _load_images(cfg: RunConfig):
    images = load_dataset(cfg.dataset, cfg.format)
    return images, parse_range(cfg.images, len(images))


def _load_labels(cfg: RunConfig, indices):
    if not cfg.labels:
        return {i: None for i in indices}
    labels = load_idx_labels(cfg.labels)
    return {i: int(labels[i]) for i in indices}


def _write_lines(path, rows, summarize):
    counts, total_time = {}, 0.0
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()
            key = summarize(row)
            counts[key] = counts.get(key, 0) + 1
            total_time += float(row.get("time_s", 0.0))
            log.info("image %s: %s (%.3fs)", row.get("image"), key, row.get("time_s", 0.0))
    return counts, total_time


def cmd_bounds(cfg: RunConfig) -> int:
    images, idxs = _load_images(cfg)
    Path(cfg.output).mkdir(parents=True, exist_ok=True)
    errors, total = 0, 0.0
    for row in _map(cfg, _bounds_unit, [(cfg, i, images[i]) for i in idxs]):
        total += row["time_s"]
        if row["status"] == "error":
            errors += 1
            log.error("image %d: %s", row["image"], row["error"])
        else:
            log.info("image %d: bounds in %.4fs", row["image"], row["time_s"])
    print(json.dumps({"command": "bounds", "images": len(idxs), "mean_time_s": total / max(1, len(idxs))}))
    return 1 if errors else 0


def cmd_certify(cfg: RunConfig) -> int:
    from .relaxation import InputRelaxation
    from .verifier import certify_relaxation, load_network_json, resolve_method

    network = load_network_json(cfg.network)
    if cfg.relaxation:
        with open(cfg.relaxation) as fh:
            relax = InputRelaxation.from_json(json.load(fh), cfg.gamma)
        rows = [certify_relaxation(network, relax, cfg.budget, cfg.method, cfg.timeout, image_id=0).to_json()]
    else:
        images, idxs = _load_images(cfg)
        labels = _load_labels(cfg, idxs)
        rows = _map(cfg, _certify_unit, [(cfg, i, images[i], network, labels[i]) for i in idxs])
    counts, total = _write_lines(cfg.output, rows, lambda r: r["status"])
    n = sum(counts.values())
    summary = {"command": "certify", "method": resolve_method(cfg.method, cfg.budget), "attempted": n, "certified": counts.get("certified", 0),
               "certified_pct": 100.0 * counts.get("certified", 0) / max(1, n), "by_status": dict(sorted(counts.items())),
               "mean_time_s": total / max(1, n)}
    print(json.dumps(summary))
    return 1 if counts.get("error") else 0


def cmd_attack(cfg: RunConfig) -> int:
    from .verifier import load_network_json

    network = load_network_json(cfg.network)
    images, idxs = _load_images(cfg)
    labels = _load_labels(cfg, idxs)
    rows = _map(cfg, _attack_unit, [(cfg, i, images[i], network, labels[i]) for i in idxs])
    counts, _ = _write_lines(cfg.output, rows, lambda r: "found" if r["found"] else "none found")
    print(json.dumps({"command": "attack", "images": sum(counts.values()), "found": counts.get("found", 0)}))
    return 0


def cmd_coverage(cfg: RunConfig) -> int:
    images, idxs = _load_images(cfg)
    rows = list(_map(cfg, _coverage_unit, [(cfg, i, images[i]) for i in idxs]))
    counts, _ = _write_lines(cfg.output, rows, lambda r: f"coverage {r['coverage']:.4f}")
    mean = sum(r["coverage"] for r in rows) / max(1, len(rows))
    print(json.dumps({"command": "coverage", "images": len(rows), "mean_coverage": mean}))
    return 0


COMMANDS = {"bounds": cmd_bounds, "certify": cmd_certify, "attack": cmd_attack, "coverage": cmd_coverage}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        return COMMANDS[cfg.command](cfg)
    except (VfcertError, OSError, argparse.ArgumentTypeError) as exc:
        log.error("error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
