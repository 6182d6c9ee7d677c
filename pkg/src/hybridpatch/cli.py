"""``hpn``: synth | extract | train | eval | match.

Exit codes: 0 success, 2 usage or data error, 3 training divergence,
4 checkpoint/artifact problem.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import data as D
from .evaluator import DESCRIPTOR_MAGIC, DescriptorFormatError, DescriptorSet, describe, evaluate_pairset, knn_match
from .losses import LossConfig
from .mining import MiningConfig
from .model import Arch, CheckpointError, Modality, Variant, checkpoint_id, export_params, import_params, init_params
from .model import HybridNetwork
from .trainer import DivergenceError, TrainConfig, prepare_data, train

log = logging.getLogger("hpn")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_ARTIFACT = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# run configuration: defaults < config file < command line
# ---------------------------------------------------------------------------

DEFAULTS: dict[str, Any] = {
    "variant": "l2",
    "arch": "hybrid_aux",
    "lr": 0.01,
    "momentum": 0.9,
    "weight_decay": 0.0005,
    "batch_size": 128,
    "lr_drop_epochs": (75, 95),
    "lr_drop_factor": 0.1,
    "early_stop_patience": 10,
    "max_epochs": 120,
    "seed": 0,
    "init_sigma": 0.01,
    "init_scheme": "he",
    "margin": 1.0,
    "main_weight": 1.0,
    "aux_weight_siam": 1.0,
    "aux_weight_asym": 1.0,
    "hm": True,
    "h_m": 0.8,
    "mining_start_epoch": 0,
    "timing": False,
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, text: str) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.replace(",", " ").split())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def read_config_file(path) -> dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_USAGE, f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise CliError(EXIT_USAGE, f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as e:
            raise CliError(EXIT_USAGE, f"{path}:{lineno}: {e}") from None
    return out


def resolve_config(file_values: dict[str, Any], cli_values: dict[str, Any]) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    cfg.update(file_values)
    cfg.update({k: v for k, v in cli_values.items() if v is not None})
    return cfg


def format_config(cfg: dict[str, Any]) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        return str(v)

    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in DEFAULTS)


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    try:
        loss = LossConfig(Variant(cfg["variant"]), cfg["margin"], cfg["main_weight"], cfg["aux_weight_siam"], cfg["aux_weight_asym"])
        mining = MiningConfig(cfg["h_m"], cfg["hm"], cfg["mining_start_epoch"])
        return TrainConfig(
            lr=cfg["lr"],
            momentum=cfg["momentum"],
            weight_decay=cfg["weight_decay"],
            batch_size=cfg["batch_size"],
            lr_drop_epochs=cfg["lr_drop_epochs"],
            lr_drop_factor=cfg["lr_drop_factor"],
            early_stop_patience=cfg["early_stop_patience"],
            max_epochs=cfg["max_epochs"],
            seed=cfg["seed"],
            init_sigma=cfg["init_sigma"],
            init_scheme=cfg["init_scheme"],
            arch=Arch(cfg["arch"]),
            timing=cfg["timing"],
            mining=mining,
            loss=loss,
        )
    except ValueError as e:
        raise CliError(EXIT_USAGE, f"invalid configuration: {e}") from None


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def sidecar_path(container) -> Path:
    return Path(str(container) + ".json")


def _write_bytes(path, blob: bytes) -> None:
    try:
        Path(path).write_bytes(blob)
    except OSError as e:
        raise CliError(EXIT_USAGE, f"cannot write {path}: {e.strerror or e}") from None


def _write_text(path, text: str) -> None:
    _write_bytes(path, text.encode("utf-8"))


def _write_container(pairs, path, meta: dict) -> None:
    try:
        D.save_container(pairs, path)
    except OSError as e:
        raise CliError(EXIT_USAGE, f"cannot write {path}: {e.strerror or e}") from None
    _write_text(sidecar_path(path), json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _load_container(path) -> list[D.PatchPair]:
    try:
        return D.load_container(path)
    except FileNotFoundError:
        raise CliError(EXIT_USAGE, f"data file not found: {path}") from None
    except (OSError, D.ContainerError) as e:
        raise CliError(EXIT_USAGE, f"cannot read container {path}: {e}") from None


def _load_split(path, pairs, seed: int) -> D.DatasetSplit:
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        if "split" in meta:
            return D.DatasetSplit.from_dict(meta["split"])
    return D.split_indices(len(D.positives_of(pairs)), seed)


def _load_checkpoint(path) -> tuple[HybridNetwork, bytes]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CliError(EXIT_ARTIFACT, f"checkpoint not found: {path}") from None
    except OSError as e:
        raise CliError(EXIT_ARTIFACT, f"cannot read checkpoint {path}: {e}") from None
    try:
        return import_params(blob), blob
    except CheckpointError as e:
        raise CliError(EXIT_ARTIFACT, f"bad checkpoint {path}: {e}") from None


def _sha(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.n < 2:
        raise CliError(EXIT_USAGE, f"--n must be >= 2 (each negative needs a distinct partner), got {args.n}")
    if not 0.0 <= args.severity <= 1.0:
        raise CliError(EXIT_USAGE, f"--severity must lie in [0, 1], got {args.severity}")
    pairs = D.synth_multimodal(args.n, args.seed, args.severity, args.noise)
    split = D.split_indices(args.n, args.seed)
    meta = {"source": "synth", "n_pairs": args.n, "seed": args.seed, "severity": args.severity, "noise": args.noise, "split": split.to_dict()}
    _write_container(pairs, args.out, meta)
    corr = D.pair_correlations(D.positives_of(pairs))
    print(f"wrote {len(pairs)} pairs ({args.n} positive) to {args.out}")
    print(f"mean X/Y correlation of positives: {corr.mean():.4f}")
    return EXIT_OK


def cmd_extract(args) -> int:
    try:
        entries = D.read_manifest(args.manifest)
    except OSError as e:
        raise CliError(EXIT_USAGE, f"cannot read manifest {args.manifest}: {e}") from None
    if not entries:
        raise CliError(EXIT_USAGE, f"manifest {args.manifest} lists no image pairs")
    positives: list[D.PatchPair] = []
    ok = 0
    for k, (px, py) in enumerate(entries):
        try:
            ix, iy = D.read_pgm(px), D.read_pgm(py)
            got = D.extract_lattice_pairs(ix, iy, args.grid_step, tag=f"{k}")
        except (OSError, ValueError) as e:
            print(f"warning: skipping {px} / {py}: {e}", file=sys.stderr)
            continue
        ok += 1
        positives.extend(got)
    if ok == 0 or len(positives) < 2:
        raise CliError(EXIT_USAGE, "no usable image pairs (need at least 2 patch positions in total)")
    pairs = positives + D.make_negatives(positives, args.seed)
    split = D.split_indices(len(positives), args.seed)
    meta = {"source": "extract", "manifest": str(args.manifest), "grid_step": args.grid_step, "seed": args.seed, "split": split.to_dict()}
    _write_container(pairs, args.out, meta)
    print(f"wrote {len(positives)} positives + {len(positives)} negatives from {ok} image pair(s) to {args.out}")
    return EXIT_OK


def _train_cli_values(args) -> dict[str, Any]:
    vals = {
        "variant": args.variant,
        "arch": args.arch,
        "hm": args.hm,
        "max_epochs": args.epochs,
        "seed": args.seed,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "init_scheme": args.init_scheme,
        "h_m": args.h_m,
    }
    if args.aux is not None:
        vals["aux_weight_siam"] = vals["aux_weight_asym"] = 1.0 if args.aux else 0.0
        if not args.aux and args.arch is None:
            vals["arch"] = Arch.HYBRID.value
    for item in args.set or []:
        if "=" not in item:
            raise CliError(EXIT_USAGE, f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise CliError(EXIT_USAGE, f"unknown config key {key!r}")
        try:
            vals[key] = _coerce(key, value)
        except ValueError as e:
            raise CliError(EXIT_USAGE, f"--set {key}: {e}") from None
    return vals


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    cfg = resolve_config(file_values, _train_cli_values(args))
    if args.print_config:
        sys.stdout.write(format_config(cfg))
        return EXIT_OK
    if not args.data or not args.out:
        raise CliError(EXIT_USAGE, "train needs --data and --out")
    tcfg = train_config(cfg)
    pairs = _load_container(args.data)
    split = _load_split(args.data, pairs, tcfg.seed)
    try:
        data = prepare_data(pairs, split)
    except ValueError as e:
        raise CliError(EXIT_USAGE, f"unusable data: {e}") from None

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(EXIT_USAGE, f"cannot create {out}: {e}") from None
    _write_text(out / "config.txt", format_config(cfg))

    net = HybridNetwork(tcfg.loss.variant)
    init_params(net, tcfg.seed, tcfg.init_sigma, tcfg.init_scheme)
    net.norm = data.stats
    records = []
    best_val = [np.inf]

    # the log and the best-so-far checkpoint are rewritten every epoch so a
    # divergent run still leaves the last good state behind
    def on_epoch(rec):
        records.append(rec)
        _write_text(out / "train_log.jsonl", "".join(json.dumps(dataclasses.asdict(r)) + "\n" for r in records))
        if rec.val_total < best_val[0]:
            best_val[0] = rec.val_total
            _write_bytes(out / "checkpoint.hybn", export_params(net))

    _write_bytes(out / "checkpoint.hybn", export_params(net))
    try:
        best, tlog = train(net, data, tcfg, on_epoch)
    except DivergenceError as e:
        print(f"error: {e}; last good checkpoint kept at {out / 'checkpoint.hybn'}", file=sys.stderr)
        return EXIT_DIVERGED
    blob = export_params(best)
    _write_bytes(out / "checkpoint.hybn", blob)
    _write_text(out / "train_log.jsonl", tlog.to_jsonl())
    why = "early stop" if tlog.stopped_early else "max epochs"
    print(f"trained {len(tlog)} epochs ({why}); best epoch {tlog.best_epoch}; checkpoint {checkpoint_id(blob)} at {out / 'checkpoint.hybn'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, blob = _load_checkpoint(args.checkpoint)
    if args.variant and Variant(args.variant) is not net.variant:
        raise CliError(EXIT_ARTIFACT, f"checkpoint {args.checkpoint} is a {net.variant.value} network, expected {args.variant}")
    pairs = _load_container(args.data)
    split = _load_split(args.data, pairs, args.seed)
    try:
        data = prepare_data(pairs, split)
    except ValueError as e:
        raise CliError(EXIT_USAGE, f"unusable data: {e}") from None
    ps = getattr(data, args.split)
    if len(ps) < 2:
        raise CliError(EXIT_USAGE, f"{args.split} split has fewer than 2 positives")
    config = {
        "data": _sha(Path(args.data).read_bytes()),
        "split": args.split,
        "arch": args.arch,
        "variant": net.variant.value,
    }
    report = evaluate_pairset(net, ps, config, checkpoint_id(blob), Arch(args.arch))
    print(f"{report.fpr95:.6f}")
    if args.report:
        _write_text(args.report, report.to_json())
    return EXIT_OK


def _descriptor_source(path, net: HybridNetwork, modality: Modality, arch: Arch) -> DescriptorSet:
    p = Path(path)
    try:
        head = p.read_bytes()[:4]
    except OSError as e:
        raise CliError(EXIT_USAGE, f"cannot read {path}: {e}") from None
    if head == DESCRIPTOR_MAGIC:
        try:
            return DescriptorSet.load(p, modality)
        except DescriptorFormatError as e:
            raise CliError(EXIT_USAGE, f"bad descriptor file {path}: {e}") from None
    pos = D.positives_of(_load_container(p))
    patches = np.stack([q.x if modality is Modality.X else q.y for q in pos]) if pos else np.zeros((0, 64, 64), np.uint8)
    return describe(net, patches, modality, arch, [q.source_id for q in pos])


def cmd_match(args) -> int:
    net, _ = _load_checkpoint(args.checkpoint)
    arch = Arch(args.arch)
    qx = _descriptor_source(args.set_x, net, Modality.X, arch)
    ry = _descriptor_source(args.set_y, net, Modality.Y, arch)
    if len(ry) == 0:
        raise CliError(EXIT_USAGE, "reference set is empty")
    if not 1 <= args.k <= len(ry):
        raise CliError(EXIT_USAGE, f"--k must lie in [1, {len(ry)}] (size of --set-y), got {args.k}")
    if args.export_x:
        qx.save(args.export_x)
    if args.export_y:
        ry.save(args.export_y)
    idx, dist = knn_match(qx, ry, args.k)
    lines = ["query\trank\tref\tdistance\n"]
    for i in range(len(qx)):
        for r in range(args.k):
            lines.append(f"{i}\t{r + 1}\t{idx[i, r]}\t{dist[i, r]:.6f}\n")
    table = "".join(lines)
    if args.out:
        _write_text(args.out, table)
    else:
        sys.stdout.write(table)
    if len(qx) == len(ry) and len(qx):
        acc = float(np.mean(idx[:, 0] == np.arange(len(qx))))
        print(f"top-1 accuracy (query i against reference i): {acc:.4f}", file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hpn", description="Hybrid multimodal patch matching: data, training, evaluation.")
    p.add_argument("--print-config", action="store_true", help="print the default run configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("synth", help="write a synthetic multimodal container")
    s.add_argument("--n", type=int, required=True, help="number of positive pairs (as many negatives are added)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--severity", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.03)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("extract", help="extract lattice patch pairs from aligned PGM images")
    e.add_argument("--manifest", required=True, help="CSV of image_x_path,image_y_path")
    e.add_argument("--grid-step", type=int, default=32)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--data")
    t.add_argument("--out", help="output directory")
    t.add_argument("--config", help="key = value configuration file")
    t.add_argument("--variant", choices=[v.value for v in Variant])
    t.add_argument("--arch", choices=[a.value for a in Arch])
    t.add_argument("--hm", dest="hm", action="store_true", default=None, help="enable hard negative mining")
    t.add_argument("--no-hm", dest="hm", action="store_false")
    t.add_argument("--aux", dest="aux", action="store_true", default=None, help="enable the auxiliary losses")
    t.add_argument("--no-aux", dest="aux", action="store_false")
    t.add_argument("--epochs", type=int, help="maximum number of epochs")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--h-m", type=float, help="mined fraction of each batch's negatives")
    t.add_argument("--init-scheme", choices=["normal", "he"])
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any configuration key")
    t.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="FPR95 of a checkpoint on a data split")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--report")
    v.add_argument("--split", choices=["test", "validation", "train"], default="test")
    v.add_argument("--arch", choices=[a.value for a in Arch], default=Arch.HYBRID.value)
    v.add_argument("--variant", choices=[x.value for x in Variant], help="fail unless the checkpoint has this variant")
    v.add_argument("--seed", type=int, default=0, help="split seed when the data has no sidecar")
    v.set_defaults(func=cmd_eval)

    m = sub.add_parser("match", help="nearest-neighbour matching of X descriptors against Y descriptors")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--set-x", required=True, help="container (its positives' X patches) or HDSC descriptor file")
    m.add_argument("--set-y", required=True, help="container (its positives' Y patches) or HDSC descriptor file")
    m.add_argument("--k", type=int, default=1)
    m.add_argument("--arch", choices=[a.value for a in Arch], default=Arch.HYBRID.value)
    m.add_argument("--out", help="write the match table here instead of stdout")
    m.add_argument("--export-x", help="save the query descriptors as an HDSC file")
    m.add_argument("--export-y", help="save the reference descriptors as an HDSC file")
    m.set_defaults(func=cmd_match)
    return p


def _limit_threads() -> None:
    n = os.environ.get("HPN_THREADS")
    if not n:
        return
    try:
        count = int(n)
    except ValueError:
        raise CliError(EXIT_USAGE, f"HPN_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=max(1, count))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.print_config and args.command is None:
            sys.stdout.write(format_config(DEFAULTS))
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        _limit_threads()
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
