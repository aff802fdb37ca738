"""Experiment lifecycle: prepare, pretrain, run (with resume) and report.

Directory layout under the experiment output directory::

    shards/                    period shards + manifest + vocabularies
    pretrain/theta0.ckpt       the shared initial model
    manifest.json              resolved config + seeds (written by `run`)
    runs/<variant>/seed_<s>/
        state_<t>/             atomically renamed per-period checkpoint dirs
        rows/period_<t>.json   one logged row per evaluated period
        periodlog.csv          assembled when the run finishes
    results.csv, report.md     written by `report`

A run interrupted at any point resumes from its newest complete state
directory and reproduces the uninterrupted byte stream: all randomness is
derived from (seed, period) and optimizer state never crosses periods.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

from .base_model import (
    BaseModelParams,
    OptConfig,
    incremental_update,
    init_params,
    load_params,
    save_params,
    standard_layout,
)
from .config import ExperimentConfig, parse_variant, variant_label
from .datastream import ShardStore, prepare_shards, read_interactions
from .errors import ConfigError, DataError
from .metagen import build_group_map, load_linear, load_meta, save_linear, save_meta
from .metrics import aggregate
from .optimize import AdamConfig
from .trainer import PeriodLog, Runner
from .synthetic import write_stream

PERIODLOG_HEADER = "period,variant,seed,auc,logloss,meta_seconds,base_seconds"


# ----------------------------------------------------------------------
# providers


class ShardProvider:
    """Relative-period view over a shard directory, after the pretrain window."""

    def __init__(self, store: ShardStore, cfg: ExperimentConfig):
        self.store = store
        self.cfg = cfg
        self._cache: dict[int, object] = {}

    def _absolute(self, rel_t: int) -> int:
        return self.cfg.split_pretrain + rel_t

    def n_periods(self) -> int:
        return self.store.n_periods - self.cfg.split_pretrain

    def dataset(self, rel_t: int):
        if rel_t not in self._cache:
            self._cache[rel_t] = self.store.load_period(self._absolute(rel_t))
        return self._cache[rel_t]

    def layout_at(self, rel_t: int):
        sizes = self.store.vocab_sizes_at(self._absolute(rel_t))
        return standard_layout(
            sizes,
            embed_dim=self.cfg.model_embed_dim,
            hidden_sizes=self.cfg.model_hidden,
            activation=self.cfg.model_activation,
            pooling=self.cfg.model_pooling,
        )


def pretrain_layout(store: ShardStore, cfg: ExperimentConfig):
    sizes = store.vocab_sizes_at(cfg.split_pretrain)
    return standard_layout(
        sizes,
        embed_dim=cfg.model_embed_dim,
        hidden_sizes=cfg.model_hidden,
        activation=cfg.model_activation,
        pooling=cfg.model_pooling,
    )


# ----------------------------------------------------------------------
# prepare / pretrain


def prepare(cfg: ExperimentConfig, out_dir) -> dict:
    """Split the configured interaction log into period shards."""
    if not cfg.data_path:
        raise ConfigError("data.path is not set; run gen-synthetic first or point at a log")
    interactions, side_names = read_interactions(cfg.data_path)
    shard_dir = Path(out_dir) / "shards"
    n_periods = cfg.data_periods if cfg.data_scheme == "equal_count" else None
    return prepare_shards(
        interactions,
        side_names,
        shard_dir,
        cfg.data_scheme,
        n_periods,
        cfg.data_negatives,
        seed=cfg.data_seed,
    )


def gen_synthetic(cfg: ExperimentConfig, path) -> int:
    return write_stream(cfg.synthetic_spec(), path)


def pretrain(cfg: ExperimentConfig, out_dir) -> Path:
    """Train the shared initial model on the union of the pretrain shards."""
    out_dir = Path(out_dir)
    store = ShardStore.open(out_dir / "shards")
    if store.n_periods < cfg.required_periods:
        raise DataError(
            f"need at least {cfg.required_periods} periods "
            f"({cfg.split_pretrain} pretrain + {cfg.n_update_periods} updates + 1 eval), "
            f"shards have {store.n_periods}"
        )
    layout = pretrain_layout(store, cfg)
    params = init_params(layout, seed=cfg.run_seed_base)
    shards = [store.load_period(t) for t in range(1, cfg.split_pretrain + 1)]
    opt = OptConfig(
        epochs=cfg.base_pretrain_epochs,
        batch_size=cfg.base_batch_size,
        adam=AdamConfig(lr=cfg.base_lr),
        seed=cfg.run_seed_base,
    )
    params = incremental_update(params, shards, opt)
    params.period = 0
    ckpt_dir = out_dir / "pretrain"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / "theta0.ckpt"
    save_params(path, params)
    return path


# ----------------------------------------------------------------------
# run persistence


def _run_dir(out_dir, variant_name: str, seed: int) -> Path:
    return Path(out_dir) / "runs" / variant_name / f"seed_{seed}"


def _state_dirs(run_dir: Path) -> list[tuple[int, Path]]:
    out = []
    for p in run_dir.glob("state_*"):
        try:
            out.append((int(p.name.split("_")[1]), p))
        except (IndexError, ValueError):
            continue
    return sorted(out)


def _save_state(run_dir: Path, runner: Runner, provider: ShardProvider) -> None:
    rel = runner.t
    tmp = run_dir / f".tmp_state_{rel}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    meta_json = {
        "t": rel,
        "warmed": runner.warmed,
        "variant": runner.tcfg.variant,
        "snapshots": sorted(runner.snapshots),
    }
    for r in sorted(runner.snapshots):
        save_params(tmp / f"base_{r}.ckpt", runner.snapshots[r])
    if runner.meta is not None:
        gm = build_group_map(provider.layout_at(rel))
        hidden = runner.hidden
        save_meta(tmp / "meta.ckpt", runner.meta, hidden, gm, period=rel)
    if runner.linear is not None:
        save_linear(tmp / "linear.ckpt", runner.linear, period=rel)
    with (tmp / "state.json").open("w", encoding="utf-8") as fh:
        json.dump(meta_json, fh, indent=2, sort_keys=True)
    final = run_dir / f"state_{rel}"
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)
    for old_rel, old_path in _state_dirs(run_dir):
        if old_rel < rel:
            shutil.rmtree(old_path)


def _restore_runner(
    run_dir: Path,
    provider: ShardProvider,
    cfg: ExperimentConfig,
    variant: str,
    seed: int,
    theta0: BaseModelParams,
) -> Runner | None:
    states = _state_dirs(run_dir)
    if not states:
        return None
    rel, state_dir = states[-1]
    with (state_dir / "state.json").open(encoding="utf-8") as fh:
        meta_json = json.load(fh)
    tcfg = cfg.trainer_config(variant, seed)
    snapshots = {}
    for r in meta_json["snapshots"]:
        layout = provider.layout_at(r)
        snapshots[r] = load_params(state_dir / f"base_{r}.ckpt", layout)
    meta = hidden = linear = None
    if (state_dir / "meta.ckpt").exists():
        gm = build_group_map(provider.layout_at(rel))
        meta, hidden, _ = load_meta(state_dir / "meta.ckpt", gm)
    if (state_dir / "linear.ckpt").exists():
        linear, _ = load_linear(state_dir / "linear.ckpt")
    return Runner(
        provider=provider,
        tcfg=tcfg,
        base_opt=_base_opt(cfg),
        pretrain=theta0,
        init_seed=seed,
        t=meta_json["t"],
        warmed=meta_json["warmed"],
        meta=meta,
        linear=linear,
        hidden=hidden,
        snapshots=snapshots,
    )


def _base_opt(cfg: ExperimentConfig) -> OptConfig:
    return OptConfig(
        epochs=cfg.base_epochs,
        batch_size=cfg.base_batch_size,
        adam=AdamConfig(lr=cfg.base_lr),
    )


def _write_row(run_dir: Path, log: PeriodLog) -> None:
    rows = run_dir / "rows"
    rows.mkdir(parents=True, exist_ok=True)
    payload = {
        "period": log.period,
        "variant": log.variant,
        "seed": log.seed,
        "auc": log.auc,
        "logloss": log.logloss,
        "meta_seconds": log.meta_seconds,
        "base_seconds": log.base_seconds,
    }
    with (rows / f"period_{log.period:04d}.json").open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _assemble_periodlog(run_dir: Path) -> Path:
    rows = []
    for p in sorted((run_dir / "rows").glob("period_*.json")):
        with p.open(encoding="utf-8") as fh:
            rows.append(json.load(fh))
    out = run_dir / "periodlog.csv"
    with out.open("w", encoding="utf-8") as fh:
        fh.write(PERIODLOG_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r['period']},{r['variant']},{r['seed']},"
                f"{r['auc']:.10f},{r['logloss']:.10f},"
                f"{r['meta_seconds']:.4f},{r['base_seconds']:.4f}\n"
            )
    return out


# ----------------------------------------------------------------------
# run


def _dedupe_variants(names) -> list[str]:
    """Drop bu1 when iu is also requested; they are the same method."""
    parsed = [(n, parse_variant(n)) for n in names]
    have_iu = any(kind == "iu" for _, (kind, _) in parsed)
    out = []
    for raw, (kind, w) in parsed:
        if have_iu and kind == "bu" and w == 1:
            continue
        label = variant_label(kind, w)
        if label not in out:
            out.append(label)
    return out


def run(
    cfg: ExperimentConfig,
    out_dir,
    variants: list[str] | None = None,
    seeds: list[int] | None = None,
    stop_after: int | None = None,
    progress=None,
) -> list[Path]:
    """Execute every (variant, seed) run; resume any that already started.

    `stop_after` aborts each run after that many newly completed update
    periods (kill/resume testing).  Returns the periodlog paths written.
    """
    out_dir = Path(out_dir)
    store = ShardStore.open(out_dir / "shards")
    if store.n_periods < cfg.required_periods:
        raise DataError(
            f"need {cfg.required_periods} periods, shards have {store.n_periods}"
        )
    theta0_path = out_dir / "pretrain" / "theta0.ckpt"
    if not theta0_path.exists():
        raise DataError(f"no pretrained checkpoint at {theta0_path}; run pretrain first")

    variant_names = _dedupe_variants(variants or cfg.run_variants)
    seed_list = seeds if seeds is not None else [cfg.run_seed_base + r for r in range(cfg.run_count)]

    manifest = {
        "config": cfg.to_lines(),
        "dataset": cfg.dataset_name,
        "variants": variant_names,
        "seeds": seed_list,
        "n_update_periods": cfg.n_update_periods,
        "test_periods": _test_period_range(cfg),
    }
    with (out_dir / "manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    logs = []
    for variant in variant_names:
        for seed in seed_list:
            logs.append(
                _run_one(cfg, out_dir, store, variant, seed, stop_after, progress)
            )
    return [p for p in logs if p is not None]


def _test_period_range(cfg: ExperimentConfig) -> list[int]:
    first = cfg.split_train + cfg.split_val + 1
    return [first + i for i in range(cfg.split_test)]


def _run_one(
    cfg: ExperimentConfig,
    out_dir: Path,
    store: ShardStore,
    variant: str,
    seed: int,
    stop_after: int | None,
    progress,
) -> Path | None:
    provider = ShardProvider(store, cfg)
    layout0 = pretrain_layout(store, cfg)
    theta0 = load_params(out_dir / "pretrain" / "theta0.ckpt", layout0)
    run_dir = _run_dir(out_dir, variant, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    if (run_dir / "periodlog.csv").exists():
        return run_dir / "periodlog.csv"

    runner = _restore_runner(run_dir, provider, cfg, variant, seed, theta0)
    if runner is None:
        runner = Runner(
            provider=provider,
            tcfg=cfg.trainer_config(variant, seed),
            base_opt=_base_opt(cfg),
            pretrain=theta0,
            init_seed=seed,
        )
    completed = 0
    tau = cfg.split_train
    last_update = cfg.n_update_periods

    def checkpoint() -> bool:
        nonlocal completed
        _save_state(run_dir, runner, provider)
        completed += 1
        if progress:
            progress(variant, seed, runner.t)
        return stop_after is not None and completed >= stop_after

    # warm-up, one persisted period at a time so interrupts resume cleanly
    while runner.t < tau + 1:
        rel = runner.t + 1
        if rel <= tau:
            base = runner._train_base(rel)
            runner.snapshots[rel] = base
            runner.t = rel
            if runner._meta_ready(rel):
                runner._train_meta(rel, provider.dataset(rel + 1))
            runner._evict(rel)
        else:
            runner.snapshots[rel] = runner._train_base(rel)
            runner.t = rel
            runner._evict(rel)
            runner.warmed = True
        if checkpoint():
            return None

    # online phase over the validation and test periods; the step at the
    # final update period only evaluates (nothing can observe training there)
    while runner.t <= last_update:
        final_period = runner.t == last_update
        log = runner.online_step(train_after=not final_period)
        _write_row(run_dir, log)
        if checkpoint():
            return None
    return _assemble_periodlog(run_dir)


# ----------------------------------------------------------------------
# report


@dataclass
class VariantResult:
    variant: str
    auc_mean: float
    auc_std: float
    logloss_mean: float
    logloss_std: float
    n_runs: int


def _read_periodlog(path: Path) -> list[dict]:
    rows = []
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            cells = line.strip().split(",")
            rows.append(dict(zip(header, cells)))
    return rows


def collect_results(out_dir) -> tuple[dict[str, VariantResult], dict]:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no run manifest under {out_dir}; run the experiment first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    test_periods = set(manifest["test_periods"])
    results = {}
    for variant_dir in sorted((out_dir / "runs").iterdir()):
        per_run_auc, per_run_logloss = [], []
        for log_path in sorted(variant_dir.glob("seed_*/periodlog.csv")):
            rows = [r for r in _read_periodlog(log_path) if int(r["period"]) in test_periods]
            if not rows:
                continue
            per_run_auc.append([float(r["auc"]) for r in rows])
            per_run_logloss.append([float(r["logloss"]) for r in rows])
        if not per_run_auc:
            continue
        auc_summary = aggregate(per_run_auc)
        ll_summary = aggregate(per_run_logloss)
        results[variant_dir.name] = VariantResult(
            variant=variant_dir.name,
            auc_mean=auc_summary.mean,
            auc_std=auc_summary.std,
            logloss_mean=ll_summary.mean,
            logloss_std=ll_summary.std,
            n_runs=auc_summary.n_runs,
        )
    return results, manifest


def write_report(out_dir) -> Path:
    """results.csv and report.md with mean +/- std and improvement vs iu."""
    results, manifest = collect_results(out_dir)
    out_dir = Path(out_dir)
    iu = results.get("iu")
    if iu is None:
        print("warning: no iu baseline run found; imp% columns omitted")
    csv_path = out_dir / "results.csv"
    order = sorted(results)
    with csv_path.open("w", encoding="utf-8") as fh:
        cols = "method,dataset,auc_mean,auc_std,logloss_mean,logloss_std"
        if iu:
            cols += ",auc_imp_pct,logloss_imp_pct"
        fh.write(cols + "\n")
        for name in order:
            r = results[name]
            line = (
                f"{name},{manifest['dataset']},"
                f"{r.auc_mean:.6f},{r.auc_std:.6f},{r.logloss_mean:.6f},{r.logloss_std:.6f}"
            )
            if iu:
                auc_imp = 100.0 * (r.auc_mean - iu.auc_mean) / iu.auc_mean
                ll_imp = 100.0 * (iu.logloss_mean - r.logloss_mean) / iu.logloss_mean
                line += f",{auc_imp:.2f},{ll_imp:.2f}"
            fh.write(line + "\n")
    md_path = out_dir / "report.md"
    with md_path.open("w", encoding="utf-8") as fh:
        fh.write(f"# Results: {manifest['dataset']}\n\n")
        fh.write(f"Averaged over test periods {sorted(manifest['test_periods'])}, ")
        fh.write(f"{results[order[0]].n_runs} run(s) per method.\n\n")
        header = "| method | AUC | LogLoss |"
        rule = "|---|---|---|"
        if iu:
            header += " AUC imp% | LogLoss imp% |"
            rule += "---|---|"
        fh.write(header + "\n" + rule + "\n")
        for name in order:
            r = results[name]
            row = (
                f"| {name} | {r.auc_mean:.4f} ± {r.auc_std:.4f} "
                f"| {r.logloss_mean:.4f} ± {r.logloss_std:.4f} |"
            )
            if iu:
                auc_imp = 100.0 * (r.auc_mean - iu.auc_mean) / iu.auc_mean
                ll_imp = 100.0 * (iu.logloss_mean - r.logloss_mean) / iu.logloss_mean
                row += f" {auc_imp:+.2f}% | {ll_imp:+.2f}% |"
            fh.write(row + "\n")
    return csv_path


def check_synthetic_trend(out_dir) -> tuple[bool, list[str]]:
    """The desk-scale trend gate: recency ordering plus the generator margin."""
    results, _ = collect_results(out_dir)
    lines = []
    ok = True

    def auc(name):
        r = results.get(name)
        return r.auc_mean if r else None

    def check(label, cond):
        nonlocal ok
        state = "pass" if cond else "FAIL"
        lines.append(f"[{state}] {label}")
        if not cond:
            ok = False

    chain = ["iu", "bu3", "bu5", "bu7"]
    values = [auc(v) for v in chain]
    if all(v is not None for v in values):
        for a, b in zip(chain, chain[1:]):
            check(f"AUC({a}) > AUC({b})", auc(a) > auc(b))
    else:
        check("iu/bu3/bu5/bu7 all present", False)
    for pair in (("gru_multi", "gru_single"), ("gru_single", "iu")):
        a, b = pair
        if auc(a) is None or auc(b) is None:
            check(f"{a} and {b} present", False)
        else:
            check(f"AUC({a}) >= AUC({b})", auc(a) >= auc(b))
    if auc("gru_multi") is not None and auc("iu") is not None:
        margin = auc("gru_multi") - auc("iu")
        check(f"AUC(gru_multi) - AUC(iu) = {margin:+.4f} >= +0.005", margin >= 0.005)
    return ok, lines
