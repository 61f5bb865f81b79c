"""Config parsing and the command-line entry points.

Configs are strict JSON: unknown keys are errors so typos cannot silently
fall back to defaults. All randomness in a run flows from one root seed, so
identical invocations write identical metrics files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward, finite_diff_grad
from .data import AugmentationSpec
from .errors import DivergenceError, ParseError, UsageError
from .federation import HyperParams, MetricsTable, build_domains, run_da, run_dg
from .model import HeadSnapshot, flatten, init_params, save_checkpoint, stage_params, unflatten
from .objective import cross_entropy, head_grad, local_loss

HP_DEFAULTS = {
    "lambda": 0.5,
    "rounds": 30,
    "local_epochs": 1,
    "batch": 16,
    "lr0": 1e-3,
    "lr1": 1e-4,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "inter_normalize": False,
    "tau": 0.9,
    "min_votes": None,  # resolved from the source count: 2 when >= 3 sources, else 1
    "gm_enabled": True,
}


@dataclass
class DataSpec:
    """Generator choice plus its parameters."""

    kind: str
    angles: list[float] = field(default_factory=list)
    n_domains: int = 0
    side: int = 0
    n_per_domain: int = 0
    noise_sigma: float = 0.0
    classes: int = 2


@dataclass
class Config:
    experiment: str
    mode: str
    data: DataSpec
    held_out: int
    arch: list[int]
    augmentation: AugmentationSpec
    hp: HyperParams
    out_dir: str
    seeds: list[int]
    gradient_matching: bool = True
    parallel_clients: bool = False

    @property
    def n_domains(self) -> int:
        return len(self.data.angles) if self.data.kind == "rotated_moons" else self.data.n_domains


def _expect(obj, path, keys_required, keys_optional):
    if not isinstance(obj, dict):
        raise ParseError(f"{path}: expected an object")
    known = set(keys_required) | set(keys_optional)
    for key in obj:
        if key not in known:
            raise ParseError(f"{path}.{key}: unknown key")
    for key in keys_required:
        if key not in obj:
            raise ParseError(f"{path}.{key}: missing required key")


def _typed(obj, path, key, types, default=None, required=False):
    if key not in obj:
        if required:
            raise ParseError(f"{path}.{key}: missing required key")
        return default
    value = obj[key]
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ParseError(f"{path}.{key}: expected {types}, got a boolean")
    if not isinstance(value, types):
        raise ParseError(f"{path}.{key}: expected {types}, got {type(value).__name__}")
    return value


def _parse_data(raw) -> DataSpec:
    kind = _typed(raw, "data", "kind", str, required=True)
    if kind == "rotated_moons":
        _expect(raw, "data", ("kind", "angles", "n_per_domain"), ("noise_sigma", "classes"))
        angles = _typed(raw, "data", "angles", list, required=True)
        if not angles or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in angles):
            raise ParseError("data.angles: expected a non-empty list of numbers")
        return DataSpec(
            kind=kind,
            angles=[float(a) for a in angles],
            n_per_domain=_typed(raw, "data", "n_per_domain", int, required=True),
            noise_sigma=float(_typed(raw, "data", "noise_sigma", (int, float), default=0.1)),
            classes=_typed(raw, "data", "classes", int, default=2),
        )
    if kind == "textured":
        _expect(raw, "data", ("kind", "n_domains", "side", "n_per_domain"), ("classes",))
        return DataSpec(
            kind=kind,
            n_domains=_typed(raw, "data", "n_domains", int, required=True),
            side=_typed(raw, "data", "side", int, required=True),
            n_per_domain=_typed(raw, "data", "n_per_domain", int, required=True),
            classes=_typed(raw, "data", "classes", int, default=2),
        )
    raise ParseError(f"data.kind: unknown generator '{kind}'")


def _parse_augmentation(raw) -> AugmentationSpec:
    kind = _typed(raw, "augmentation", "kind", str, required=True)
    try:
        if kind == "identity":
            _expect(raw, "augmentation", ("kind",), ())
            return AugmentationSpec.identity()
        if kind == "gaussian_noise":
            _expect(raw, "augmentation", ("kind", "sigma"), ())
            return AugmentationSpec.gaussian_noise(float(_typed(raw, "augmentation", "sigma", (int, float), required=True)))
        if kind == "input_rotation":
            _expect(raw, "augmentation", ("kind", "max_degrees"), ())
            return AugmentationSpec.input_rotation(float(_typed(raw, "augmentation", "max_degrees", (int, float), required=True)))
        if kind == "amplitude_mix":
            _expect(raw, "augmentation", ("kind", "eta_max"), ())
            return AugmentationSpec.amplitude_mix(float(_typed(raw, "augmentation", "eta_max", (int, float), required=True)))
    except UsageError as e:
        raise ParseError(f"augmentation: {e}") from None
    raise ParseError(f"augmentation.kind: unknown kind '{kind}'")


def _parse_hp(raw, n_sources: int) -> HyperParams:
    _expect(raw, "hp", (), tuple(HP_DEFAULTS))
    merged = dict(HP_DEFAULTS)
    merged.update(raw)
    lam = merged["lambda"]
    if isinstance(lam, bool) or not isinstance(lam, (int, float)):
        raise ParseError("hp.lambda: expected a number")
    if not 0.0 <= lam <= 1.0:
        raise ParseError(f"hp.lambda: {lam} outside [0, 1]")
    min_votes = merged["min_votes"]
    if min_votes is None:
        min_votes = 2 if n_sources >= 3 else 1
    hp = HyperParams(
        lam=float(lam),
        rounds=_typed(merged, "hp", "rounds", int),
        local_epochs=_typed(merged, "hp", "local_epochs", int),
        batch=_typed(merged, "hp", "batch", int),
        lr0=float(_typed(merged, "hp", "lr0", (int, float))),
        lr1=float(_typed(merged, "hp", "lr1", (int, float))),
        momentum=float(_typed(merged, "hp", "momentum", (int, float))),
        weight_decay=float(_typed(merged, "hp", "weight_decay", (int, float))),
        inter_normalize=_typed(merged, "hp", "inter_normalize", bool),
        tau=float(_typed(merged, "hp", "tau", (int, float))),
        min_votes=int(min_votes),
        gm_enabled=_typed(merged, "hp", "gm_enabled", bool),
    )
    try:
        hp.validate()
    except UsageError as e:
        raise ParseError(str(e)) from None
    return hp


def parse_config_dict(raw: dict) -> Config:
    _expect(
        raw,
        "config",
        ("experiment", "mode", "data", "held_out", "arch", "seeds"),
        ("augmentation", "hp", "out_dir", "gradient_matching", "parallel_clients"),
    )
    mode = _typed(raw, "config", "mode", str, required=True)
    if mode not in ("dg", "da"):
        raise ParseError(f"mode: expected 'dg' or 'da', got '{mode}'")
    data = _parse_data(_typed(raw, "config", "data", dict, required=True))
    n_domains = len(data.angles) if data.kind == "rotated_moons" else data.n_domains
    held_out = _typed(raw, "config", "held_out", int, required=True)
    if not 0 <= held_out < n_domains:
        raise ParseError(f"held_out: index {held_out} outside the {n_domains} configured domains")
    arch = _typed(raw, "config", "arch", list, required=True)
    if not arch or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 1 for d in arch):
        raise ParseError("arch: expected a non-empty list of positive integers")
    d_in = 2 if data.kind == "rotated_moons" else data.side * data.side
    if arch[0] != d_in:
        raise ParseError(f"arch: input width {arch[0]} does not match the data width {d_in}")
    seeds = _typed(raw, "config", "seeds", list, required=True)
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ParseError("seeds: expected a non-empty list of non-negative integers")
    aug_raw = raw.get("augmentation", {"kind": "identity"})
    hp = _parse_hp(raw.get("hp", {}), n_sources=n_domains - 1)
    experiment = _typed(raw, "config", "experiment", str, required=True)
    gradient_matching = _typed(raw, "config", "gradient_matching", bool, default=True)
    hp.gm_enabled = hp.gm_enabled and gradient_matching
    return Config(
        experiment=experiment,
        mode=mode,
        data=data,
        held_out=held_out,
        arch=[int(d) for d in arch],
        augmentation=_parse_augmentation(aug_raw),
        hp=hp,
        out_dir=_typed(raw, "config", "out_dir", str, default=f"runs/{experiment}"),
        seeds=[int(s) for s in seeds],
        gradient_matching=gradient_matching,
        parallel_clients=_typed(raw, "config", "parallel_clients", bool, default=False),
    )


def parse_config(path) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read config {path}: {e}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"config parse error at line {e.lineno} column {e.colno}: {e.msg}") from None
    return parse_config_dict(raw)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply dotted-path KEY=VALUE overrides to the raw config dict."""
    out = json.loads(json.dumps(raw))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ParseError(f"override '{item}' is not KEY=VALUE")
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ParseError(f"override '{key}': '{part}' is not an object")
        node[parts[-1]] = parsed
    return out


def config_hash(config: Config) -> str:
    """Stable digest of the resolved experiment (execution flags excluded)."""
    payload = asdict(config)
    payload.pop("parallel_clients", None)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def resolved_config_dict(config: Config) -> dict:
    payload = asdict(config)
    payload["hp"]["lambda"] = payload["hp"].pop("lam")
    return payload


def _headline(mode: str, table: MetricsTable, held_out: int) -> float:
    phase = "eval_target" if mode == "da" else "eval_unseen"
    return table.final_value(phase, "accuracy", held_out)


def cmd_run(mode: str, config: Config) -> int:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = run_da if mode == "da" else run_dg
    digest = config_hash(config)
    finals = {}
    row_counts = {}
    for seed in config.seeds:
        cfg = replace(config, hp=replace(config.hp, seed=seed))
        try:
            table = runner(cfg)
        except DivergenceError as e:
            print(f"seed {seed}: diverged: {e}", file=sys.stderr)
            return 2
        table.write_csv(out_dir / f"seed_{seed}.csv")
        save_checkpoint(table.final_model, out_dir / f"model_seed_{seed}.json")
        if table.final_target_model is not None:
            save_checkpoint(table.final_target_model, out_dir / f"target_model_seed_{seed}.json")
        acc = _headline(mode, table, config.held_out)
        finals[str(seed)] = acc
        row_counts[str(seed)] = len(table.rows)
        print(f"seed {seed}: final {'target' if mode == 'da' else 'unseen'} accuracy {acc:.4f}")
    values = np.array(list(finals.values()))
    mean, std = float(values.mean()), float(values.std())
    print(f"{config.experiment}: headline accuracy {mean:.4f} +/- {std:.4f} over {len(values)} seeds")
    rows = sorted(set(row_counts.values()))
    summary = {
        "config_hash": digest,
        "config": resolved_config_dict(config),
        "final": {"per_seed": finals, "headline_mean": mean, "headline_std": std},
        "per_round_rows": rows[0] if len(rows) == 1 else row_counts,
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _flat_loss_fn(arch, classes, snapshots, X, X_aug, y, lam):
    def f(theta):
        tape = Tape()
        loss, _ = local_loss(tape, unflatten(arch, classes, theta), snapshots, X, X_aug, y, lam)
        return float(tape.value(loss))

    return f


def grad_check_instances(arch, trials, seed):
    """Random full-objective instances for gradient verification.

    Biases are jittered away from zero so no relu pre-activation sits
    exactly on the kink, where the loss is one-sided and a central
    difference is not a valid oracle.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    lams = [0.0, 0.3, 0.5, 1.0]
    for trial in range(trials):
        depth = int(rng.integers(1, len(arch)))
        dims = [int(rng.integers(2, d + 1)) for d in arch[: depth + 1]]
        classes = int(rng.integers(2, 5))
        batch = int(rng.integers(1, 9))
        params = init_params(dims, classes, int(rng.integers(0, 2**31)))
        for _, b in params.feature:
            b += rng.normal(0.0, 0.2, size=b.shape)
        params.head_b += rng.normal(0.0, 0.2, size=classes)
        X = rng.normal(0.0, 1.5, size=(batch, dims[0]))
        X_aug = X + rng.normal(0.0, 0.3, size=X.shape)
        y = rng.integers(0, classes, size=batch)
        n_snaps = int(rng.integers(1, 4))
        snapshots = [
            HeadSnapshot(j, rng.normal(0.0, 0.7, size=params.head_w.shape), rng.normal(0.0, 0.3, size=classes), 0)
            for j in range(n_snaps)
        ]
        lam = lams[trial % len(lams)]
        yield params, snapshots, X, X_aug, y, lam


def total_loss_gradient(params, snapshots, X, X_aug, y, lam):
    """Reverse-mode gradient of the combined loss in flat parameter order."""
    tape = Tape()
    staged = stage_params(tape, params)
    loss, _ = local_loss(tape, staged, snapshots, X, X_aug, y, lam)
    grads = backward(tape, loss)
    return np.concatenate([grads[nid].ravel() for nid in staged.all_ids()])


def cmd_grad_check(arch: list[int], trials: int, tolerance: float, seed: int) -> int:
    """Compare reverse-mode gradients against central differences.

    Also checks the closed-form head gradient against the autodiff gradient
    of the cross-entropy with respect to the head parameters.
    """
    if trials < 1:
        raise UsageError(f"trials must be >= 1, got {trials}")
    worst_rel = 0.0
    worst_abs = 0.0
    worst_coord = (0, 0)
    for trial, (params, snapshots, X, X_aug, y, lam) in enumerate(
        grad_check_instances(arch, trials, seed)
    ):
        theta = flatten(params)
        g_ad = total_loss_gradient(params, snapshots, X, X_aug, y, lam)
        f = _flat_loss_fn(params.arch, params.classes, snapshots, X, X_aug, y, lam)
        g_fd = finite_diff_grad(f, theta, 1e-5)
        for k in range(theta.size):
            err = abs(g_ad[k] - g_fd[k])
            if abs(g_fd[k]) > 1e-6:
                rel = err / abs(g_fd[k])
                if rel > worst_rel:
                    worst_rel, worst_coord = rel, (trial, k)
            elif err > worst_abs:
                worst_abs = err
    # closed-form head gradient vs reverse mode over the head leaves
    worst_head = 0.0
    rng = np.random.default_rng(np.random.SeedSequence(seed + 1))
    for _ in range(trials):
        batch = int(rng.integers(1, 9))
        d_h = int(rng.integers(2, 9))
        classes = int(rng.integers(2, 6))
        H = rng.normal(0.0, 1.0, size=(batch, d_h))
        w = rng.normal(0.0, 0.8, size=(classes, d_h))
        b = rng.normal(0.0, 0.3, size=classes)
        y = rng.integers(0, classes, size=batch)
        tape = Tape()
        w_id = tape.leaf(w, param=True)
        b_id = tape.leaf(b, param=True)
        h_id = tape.constant(H)
        z = ad.add(tape, ad.matmul(tape, h_id, ad.transpose(tape, w_id)), b_id)
        grads = backward(tape, cross_entropy(tape, z, y))
        ad_flat = np.concatenate([grads[w_id].ravel(), grads[b_id].ravel()])
        tape2 = Tape()
        h2 = tape2.constant(H)
        closed = tape2.value(head_grad(tape2, h2, y, w, b))
        worst_head = max(worst_head, float(np.abs(closed - ad_flat).max()))
    print(f"worst relative error (|g| > 1e-6): {worst_rel:.3e} at trial {worst_coord[0]}, coordinate {worst_coord[1]}")
    print(f"worst absolute error (|g| <= 1e-6): {worst_abs:.3e}")
    print(f"worst closed-form head-gradient deviation: {worst_head:.3e}")
    if worst_rel > tolerance or worst_abs > 1e-7 or worst_head > 1e-10:
        print(
            f"tolerance violated: rel {worst_rel:.3e} > {tolerance:.3e} "
            f"at trial {worst_coord[0]}, coordinate {worst_coord[1]}",
            file=sys.stderr,
        )
        return 3
    return 0


def cmd_gen_data(config: Config, out: str) -> int:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = replace(config, hp=replace(config.hp, seed=config.seeds[0]))
    for ds in build_domains(cfg):
        path = out_dir / f"domain_{ds.domain_id}.csv"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            width = ds.X.shape[1]
            fh.write("domain_id,y," + ",".join(f"x{i}" for i in range(width)) + "\n")
            for row, label in zip(ds.X, ds.y):
                fh.write(f"{ds.domain_id},{label}," + ",".join(repr(v) for v in row) + "\n")
        print(f"wrote {path} ({ds.N} rows)")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgm",
        description=(
            "Desk-scale federated domain generalization with gradient matching. "
            "Config defaults: lambda=0.5, rounds=30, batch=16, lr0=1e-3, lr1=1e-4, "
            "momentum=0.9, weight_decay=5e-4, local_epochs=1, tau=0.9, "
            "min_votes=2 (1 when only 2 sources), inter_normalize=false."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument("--out", default=None, help="output directory (overrides config.out_dir)")
        p.add_argument("--seed", type=int, action="append", default=[], help="append a seed to config.seeds")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted-path config override, repeatable")
        p.add_argument("--parallel-clients", choices=("true", "false"), default=None, help="train the round's clients in parallel threads")
        return p

    add_run("run-dg", "leave-one-domain-out generalization experiment")
    add_run("run-da", "unlabeled-target adaptation experiment")

    g = sub.add_parser("grad-check", help="verify gradients against central finite differences")
    g.add_argument("--arch", default="6,8,5", help="maximum layer widths, comma separated")
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--tolerance", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("gen-data", help="write the configured datasets as CSV")
    d.add_argument("--config", required=True)
    d.add_argument("--out", required=True)
    return parser


def _load_run_config(args) -> Config:
    raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if args.override:
        raw = apply_overrides(raw, args.override)
    config = parse_config_dict(raw)
    if args.out is not None:
        config = replace(config, out_dir=args.out)
    if getattr(args, "seed", None):
        config = replace(config, seeds=config.seeds + [s for s in args.seed if s not in config.seeds])
    if getattr(args, "parallel_clients", None) is not None:
        config = replace(config, parallel_clients=args.parallel_clients == "true")
    return config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command in ("run-dg", "run-da"):
            config = _load_run_config(args)
            mode = "dg" if args.command == "run-dg" else "da"
            if config.mode != mode:
                raise ParseError(f"config.mode is '{config.mode}' but the subcommand expects '{mode}'")
            return cmd_run(mode, config)
        if args.command == "grad-check":
            arch = [int(d) for d in args.arch.split(",")]
            return cmd_grad_check(arch, args.trials, args.tolerance, args.seed)
        if args.command == "gen-data":
            return cmd_gen_data(parse_config(args.config), args.out)
    except (ParseError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as e:
        print(f"error: config parse error at line {e.lineno} column {e.colno}: {e.msg}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


if __name__ == "__main__":
    raise SystemExit(main())
