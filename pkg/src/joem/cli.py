"""``joem`` command-line entry point.

    joem <gen-data|train|infer|sweep|eval|gradcheck> [--config PATH] [--seed N] [flags...]

Every command exits 0 on success and non-zero on any contract violation,
with the message on standard error. Files are written to a temporary name
and renamed, so a failed command leaves no partial artifacts.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from joem import evaluate, formats
from joem.data import (SceneSpec, SplitSpec, default_split, gen_semantic_table, load_dataset,
                       make_benchmark, save_dataset, with_background)
from joem.embedding import SemanticEncoderParams, load_table
from joem.errors import InvalidInput, InvalidParameter, JoemError, TrainingDiverged
from joem.inference import RULES
from joem.losses import (ce_loss, flatten, grad_check, regression_loss, sc_loss, semantic_targets,
                         total_loss, unflatten)
from joem.model import ModelParams, TrainConfig, train
from joem.pipeline import cs_auto_grid, image_features, predict, prototypes

log = logging.getLogger("joem")

GRADCHECK_THRESHOLD = 1e-4
LOSS_LOG_HEADER = ["epoch", "ce", "bar", "sc", "total", "seen_acc"]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    num_classes: int = 12
    n_unseen: int = 4
    semantic_dim: int = 16
    n_train: int = 200
    n_test: int = 50
    table: str | None = None
    seen: list | None = None
    unseen: list | None = None
    background: int = 0


@dataclass
class RuleConfig:
    name: str = "ac"
    sigma: float = 0.35
    gamma: float = 1.0
    sigma_step: float = 0.05
    gamma_points: int = 49


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    rule: RuleConfig = field(default_factory=RuleConfig)

    def split(self) -> SplitSpec:
        d = self.data
        if d.seen is not None or d.unseen is not None:
            if d.seen is None or d.unseen is None:
                raise InvalidParameter("give both data.seen and data.unseen, or neither")
            return SplitSpec(d.seen, d.unseen, d.background)
        return default_split(d.num_classes, d.n_unseen)


_SECTIONS = {"data": DataConfig, "scene": SceneSpec, "train": TrainConfig, "rule": RuleConfig}


_NULLABLE = {"table": str, "seen": list, "unseen": list}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise InvalidParameter(f"config section {where!r} must be an object")
    # the run seed lives at top level (or --seed) and is copied into sections
    known = {f.name for f in fields(cls)} - {"seed"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise InvalidParameter(f"unknown key(s) in {where}: {', '.join(unknown)}")
    defaults = cls()
    for key, val in values.items():
        if not _type_ok(key, val, getattr(defaults, key)):
            raise InvalidParameter(f"{where}.{key}: bad value {val!r}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise InvalidParameter(f"{where}: {exc}") from None


def _is_int(val) -> bool:
    return isinstance(val, int) and not isinstance(val, bool)


def _type_ok(key, val, ref) -> bool:
    if key in _NULLABLE:
        ok = val is None or isinstance(val, _NULLABLE[key])
        return ok and (not isinstance(val, list) or all(_is_int(v) for v in val))
    if isinstance(ref, bool):
        return isinstance(val, bool)
    if isinstance(ref, int):
        return _is_int(val)
    if isinstance(ref, float):
        return _is_int(val) or isinstance(val, float)
    if isinstance(ref, str):
        return isinstance(val, str)
    if isinstance(ref, tuple):
        return isinstance(val, list) and all(_is_int(v) for v in val)
    return False


def load_config(path: str | None) -> RunConfig:
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidParameter(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise InvalidParameter(f"cannot read config {path}: {exc}") from None
    return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise InvalidParameter("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise InvalidParameter(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise InvalidParameter(f"seed must be an integer, got {seed!r}")
    parts = {name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    if parts["rule"].name not in RULES:
        raise InvalidParameter(f"rule.name must be one of {RULES}")
    return RunConfig(seed=seed, **parts)


def apply_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    """``--seed`` (or the config seed) drives the table, scenes and training."""
    s = cfg.seed if seed is None else seed
    cfg.seed = s
    cfg.scene.seed = s
    cfg.train.seed = s
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out_dir) -> None:
    d = cfg.data
    split = cfg.split()
    if d.table:
        table = with_background(load_table(d.table), split.background, cfg.seed)
    else:
        table = gen_semantic_table(d.num_classes, d.semantic_dim, cfg.seed)
    missing = [c for c in split.all_classes if c not in table]
    if missing:
        raise InvalidInput(f"semantic table lacks classes {missing}")
    train_set, test_set = make_benchmark(cfg.scene, table, split, d.n_train, d.n_test, cfg.seed)
    save_dataset(out_dir, cfg.scene, split, table, train_set, test_set, {"seed": cfg.seed})
    log.info("wrote %d train / %d test samples to %s", len(train_set), len(test_set), out_dir)


def save_checkpoint(path, params: ModelParams) -> None:
    formats.save_tensors(path, params.to_tensors())


def load_checkpoint(path) -> ModelParams:
    try:
        return ModelParams.from_tensors(formats.load_tensors(path))
    except FileNotFoundError:
        raise InvalidInput(f"checkpoint {path} does not exist") from None


def _loss_log_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_LOG_HEADER)
    for row in history:
        writer.writerow([row["epoch"], repr(row["ce"]), repr(row["reg"]), repr(row["sc"]),
                         repr(row["total"]), repr(row["seen_acc"])])
    return buf.getvalue()


def cmd_train(cfg: RunConfig, data_dir, out_ckpt, log_csv=None) -> list[dict]:
    ds = load_dataset(data_dir, which=("train",))
    log_csv = log_csv or f"{out_ckpt}.losses.csv"
    try:
        result = train(cfg.train, ds.train, ds.table, ds.split)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(f"{out_ckpt}.last-good", exc.last_good)
        raise
    save_checkpoint(out_ckpt, result.params)
    with formats.atomic_write(log_csv, "w") as fh:
        fh.write(_loss_log_csv(result.history))
    return result.history


def cmd_infer(ckpt, data_dir, rule: str, param, out_dir, write_csv: bool = False) -> list:
    if rule not in RULES:
        raise InvalidParameter(f"unknown rule {rule!r}; expected one of {RULES}")
    params = load_checkpoint(ckpt)
    ds = load_dataset(data_dir, which=("test",))
    preds = predict(params, ds.table, ds.split, ds.test, rule, param)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(preds):
        formats.save_pgm(out / f"{i:04d}.pgm", mask)
        if write_csv:
            formats.save_mask_csv(out / f"{i:04d}.csv", mask)
    return preds


def parse_grid(spec: str, rule: str, features=None, protos=None) -> list[float]:
    """``a:b:step`` (inclusive), ``v1,v2,...``, or ``auto[:N]`` (CS only)."""
    spec = spec.strip()
    try:
        if spec.startswith("auto"):
            if rule != "cs":
                raise InvalidParameter("'auto' grids are only defined for rule cs")
            n = int(spec.split(":")[1]) if ":" in spec else 49
            return cs_auto_grid(features, protos, n)
        if ":" in spec:
            start, stop, step = (float(x) for x in spec.split(":"))
            if step <= 0 or stop < start:
                raise InvalidParameter(f"bad grid range {spec!r}")
            n = int(math.floor((stop - start) / step + 1e-9))
            return [round(start + i * step, 10) for i in range(n + 1)]
        return [float(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise InvalidParameter(f"cannot parse grid {spec!r}") from None


def cmd_sweep(ckpt, data_dir, rule: str, grid_spec: str, out_csv) -> list:
    params = load_checkpoint(ckpt)
    ds = load_dataset(data_dir, which=("test",))
    protos = prototypes(params, ds.table, ds.split)
    feats = image_features(params, ds.test)
    grid = parse_grid(grid_spec, rule, feats, protos)
    points = evaluate.sweep(feats, [s.mask for s in ds.test], protos, ds.split, rule, grid)
    evaluate.write_curve(out_csv, points)
    return points


def cmd_eval(ckpt, data_dir, rule: str, param) -> evaluate.MetricReport:
    params = load_checkpoint(ckpt)
    ds = load_dataset(data_dir, which=("test",))
    preds = predict(params, ds.table, ds.split, ds.test, rule, param)
    return evaluate.evaluate_predictions(preds, [s.mask for s in ds.test], ds.split)


def gradcheck_report(seed: int = 0, corrupt: bool = False, instances: int = 3) -> dict[str, float]:
    """Worst relative gradient errors of every loss on random instances.

    ``corrupt`` perturbs the analytic gradients as a negative control.
    """
    from joem.embedding import SemanticTable

    rng = np.random.default_rng(seed)
    split = SplitSpec([0, 1, 2, 3], [4, 5])
    worst = {"ce": 0.0, "bar": 0.0, "sc": 0.0, "total": 0.0}
    for _ in range(instances):
        table = SemanticTable({c: rng.standard_normal(5) for c in range(6)})
        v = rng.standard_normal((6, 6, 3))
        y = rng.integers(0, 4, (6, 6))
        y[:, :3] = 1
        layout = {"v": v, "w": rng.standard_normal((4, 3)),
                  "W": rng.standard_normal((5, 3)), "b": rng.standard_normal(3)}
        x0, lay = flatten(layout)
        s_map = semantic_targets(y, table, split, 2)

        def make(kind):
            def f(x):
                p = unflatten(x, lay)
                enc = SemanticEncoderParams(p["W"], p["b"])
                ce = ce_loss(p["v"], p["w"], y, split)
                bar = regression_loss(p["v"], y, s_map, enc, split)
                sc = sc_loss(table, enc, split, 5.0, 1.0)
                tot = total_loss(ce, bar, sc, 0.7)
                term = {"ce": ce, "bar": bar, "sc": sc, "total": tot}[kind]
                g = {"v": np.zeros_like(p["v"]), "w": np.zeros_like(p["w"]),
                     "W": np.zeros_like(p["W"]), "b": np.zeros_like(p["b"])}
                for src, dst in (("v", "v"), ("w", "w"), ("enc_weight", "W"), ("enc_bias", "b")):
                    if src in term.grads:
                        g[dst] = term.grads[src]
                grad = flatten(g)[0]
                if corrupt:
                    grad = grad * 1.01 + 1e-3
                return term.value, grad
            return f

        for kind in worst:
            worst[kind] = max(worst[kind], grad_check(make(kind), x0))
    return worst


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="joem", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)

    p = sub.add_parser("train", help="train both encoders jointly")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log CSV (default: <out>.losses.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--r", type=int)

    for name, helptext in (("infer", "write predicted masks"), ("eval", "print test metrics")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--rule", choices=RULES)
        p.add_argument("--param", type=float)
        if name == "infer":
            p.add_argument("--out", required=True)
            p.add_argument("--csv", action="store_true", help="also write CSV masks")
        else:
            p.add_argument("--json", help="write the report as JSON")

    p = sub.add_parser("sweep", help="sweep a calibration parameter")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rule", choices=("cs", "ac"), required=True)
    p.add_argument("--grid", help="a:b:step, comma list, or auto[:N] for cs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    _common(p)
    p.add_argument("--corrupt", action="store_true", help="negative control: perturb gradients")
    return parser


def _rule_param(cfg: RunConfig, rule: str | None, param: float | None):
    rule = rule or cfg.rule.name
    if param is None:
        param = {"nn": None, "cs": cfg.rule.gamma, "ac": cfg.rule.sigma}[rule]
    return rule, param


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = apply_seed(load_config(args.config), args.seed)
        if args.command == "gen-data":
            if args.n_train is not None:
                cfg.data.n_train = args.n_train
            if args.n_test is not None:
                cfg.data.n_test = args.n_test
            cmd_gen_data(cfg, args.out)
        elif args.command == "train":
            overrides = {k: getattr(args, k) for k in ("epochs", "lam", "r") if getattr(args, k) is not None}
            if overrides:
                cfg.train = TrainConfig(**{**cfg.train.to_dict(), **overrides})
            history = cmd_train(cfg, args.data, args.out, args.log)
            if history:
                last = history[-1]
                print(f"epoch {last['epoch']}: total {last['total']:.4f} seen_acc {last['seen_acc']:.3f}")
        elif args.command == "infer":
            rule, param = _rule_param(cfg, args.rule, args.param)
            preds = cmd_infer(args.ckpt, args.data, rule, param, args.out, args.csv)
            print(f"wrote {len(preds)} masks to {args.out}")
        elif args.command == "eval":
            rule, param = _rule_param(cfg, args.rule, args.param)
            report = cmd_eval(args.ckpt, args.data, rule, param)
            print(report.summary())
            if args.json:
                with formats.atomic_write(args.json, "w") as fh:
                    json.dump({"rule": rule, "param": param, "miou_s": report.miou_s,
                               "miou_u": report.miou_u, "hiou": report.hiou, "tp_u": report.tp_u,
                               "fn_s_to_u": report.fn_s_to_u,
                               "iou": {str(k): v for k, v in report.iou.items()}}, fh, indent=2)
        elif args.command == "sweep":
            grid = args.grid or (f"{cfg.rule.sigma_step}:1:{cfg.rule.sigma_step}" if args.rule == "ac"
                                 else f"auto:{cfg.rule.gamma_points}")
            points = cmd_sweep(args.ckpt, args.data, args.rule, grid, args.out)
            print(f"wrote {len(points)} sweep points to {args.out}")
        elif args.command == "gradcheck":
            worst = gradcheck_report(cfg.seed, corrupt=args.corrupt)
            failed = False
            for name, err in worst.items():
                status = "ok" if err <= GRADCHECK_THRESHOLD else "FAIL"
                failed |= status == "FAIL"
                print(f"{name:6s} max relative error {err:.3e}  {status}")
            return 1 if failed else 0
    except (JoemError, OSError) as exc:
        print(f"joem {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
