"""Command-line front end.

Subcommands: gen-data, init-model, probe, validate, train, sweep, rerun.
Every run is a pure function of (resolved settings, seed, input files); each
command writes a manifest.json snapshotting the resolved settings and the
artifact list, and ``rerun`` replays a manifest into a fresh directory,
reproducing every output file byte for byte.

Exit codes: 0 success, 1 a validation/check failure, 2 usage or config error.

Seed-derived streams (children of the run seed): 0 model init, 1 probe data,
2 task data, 3 adapter init, 4 Monte Carlo draws.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .config import (ConfigError, Settings, load_settings, settings_from_dict,
                     settings_to_dict)
from .linalg import RngState
from .lora import (PlacementPlan, plan_all, plan_dominant_only,
                   plan_full_weight_dominant, plan_kind_subset, plan_layer_subset,
                   save_adapter)
from .model import (ModelParams, ModuleId, ProjKind, input_dims, load_checkpoint,
                    parse_kind, save_checkpoint)
from .page import (PAGE_REPORT_FIELDS, concentration_report, page_closed_form,
                   page_report_rows, select_dominant)
from .probe import load_probe_set, module_sensitivity, save_probe_set
from .serialize import read_json, save_arrays, write_csv, write_json
from .tasks import TaskSpec, generate_samples, make_task_data
from .trainer import (COMPARISON_FIELDS, comparison_rows, lr_at, placement_sweep,
                      pretrain_base, run_experiment)
from .validate import VALIDATION_FIELDS, run_validation, validation_rows

STREAM_MODEL, STREAM_PROBE_DATA, STREAM_TASK_DATA, STREAM_ADAPTERS, STREAM_MC = range(5)


class Manifest:
    def __init__(self, command: str, settings: Settings, inputs: dict):
        self.data = {
            "command": command,
            "tool_version": __version__,
            "seed": settings.seed,
            "settings": settings_to_dict(settings),
            "inputs": inputs,
            "artifacts": [],
        }

    def add(self, name: str) -> None:
        self.data["artifacts"].append(name)

    def write(self, out_dir: Path) -> None:
        self.data["artifacts"] = sorted(self.data["artifacts"])
        write_json(out_dir / "manifest.json", self.data)


def _resolve_settings(args) -> Settings:
    settings = load_settings(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        settings = _replace(settings, seed=args.seed)
    if getattr(args, "trials", None) is not None:
        settings = _replace(settings, page_trials=args.trials)
    if getattr(args, "restrict_kind", None) is not None:
        settings = _replace(settings, restrict_kind=args.restrict_kind)
    if getattr(args, "checkpoint", None) is not None:
        settings = _replace(settings, checkpoint=args.checkpoint)
    if getattr(args, "probe_set", None) is not None:
        settings = _replace(settings, probe_set=args.probe_set)
    return settings


def _replace(settings: Settings, **kw) -> Settings:
    import dataclasses
    return dataclasses.replace(settings, **kw)


def _workers(args) -> int:
    if getattr(args, "deterministic", False):
        return 1
    return max(1, getattr(args, "workers", 1) or 1)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_base(settings: Settings) -> ModelParams:
    """Model weights from the configured checkpoint, or a seed-built base.

    Without a checkpoint the base is initialized from the model-init stream
    and, when pretrain steps are configured, pretrained on the copy task so
    probing sees a nontrivially structured network.
    """
    if settings.checkpoint is not None:
        return load_checkpoint(settings.checkpoint)
    from .model import init_params
    params = init_params(settings.model, RngState(settings.seed).child(STREAM_MODEL))
    if settings.pretrain_steps > 0:
        spec = TaskSpec(name="copy", copy_prompt_len=settings.task.copy_prompt_len)
        data = make_task_data(spec, RngState(settings.seed).child(STREAM_TASK_DATA),
                              settings.model.vocab_size,
                              settings.train_size, settings.eval_size)
        pretrain_base(params, settings.pretrain_config(), data)
    return params


def _load_probe_samples(settings: Settings):
    if settings.probe_set is not None:
        samples = load_probe_set(settings.probe_set)
        too_long = [i for i, s in enumerate(samples)
                    if len(s) > settings.model.max_seq_len]
        if too_long:
            raise ValueError(f"probe samples exceed max_seq_len "
                             f"{settings.model.max_seq_len}: records {too_long}")
        return samples
    return generate_samples(settings.task, settings.probe_samples,
                            RngState(settings.seed).child(STREAM_PROBE_DATA),
                            settings.model.vocab_size)


def _probe_analysis(settings: Settings, base: ModelParams, workers: int):
    samples = _load_probe_samples(settings)
    sens = module_sensitivity(base, samples, workers=workers)
    pm = page_closed_form(sens, settings.rank, settings.lora_scale,
                          input_dims(settings.model))
    dominant = select_dominant(pm, settings.restrict())
    return samples, sens, pm, dominant


def _write_probe_reports(out_dir: Path, manifest: Manifest, settings: Settings,
                         sens, pm, dominant: ModuleId) -> None:
    rows = page_report_rows(sens, pm, input_dims(settings.model))
    write_csv(out_dir / "page_report.csv", PAGE_REPORT_FIELDS, rows)
    manifest.add("page_report.csv")
    conc = concentration_report(pm)
    lines = [
        f"modules: {len(pm.values)}  probe samples: {sens.n_samples}",
        f"rank: {pm.rank}  scale: {pm.scale!r}  provenance: {pm.provenance.value}",
        f"dominant module: {dominant.name}"
        f" (restriction: {settings.restrict_kind})",
        f"dominant share of total energy: {conc.share_of_total!r}",
        f"dominant share within its kind: {conc.share_among_down!r}",
    ]
    (out_dir / "page_report.txt").write_text("\n".join(lines) + "\n")
    manifest.add("page_report.txt")
    write_json(out_dir / "dominant.json",
               {"module": dominant.name, "layer": dominant.layer,
                "kind": dominant.kind.value, "page": pm.values[dominant]})
    manifest.add("dominant.json")


def cmd_gen_data(args, settings=None) -> int:
    settings = _resolve_settings(args) if settings is None else settings
    out_dir = _out_dir(args)
    manifest = Manifest("gen-data", settings, {})
    probe = generate_samples(settings.task, settings.probe_samples,
                             RngState(settings.seed).child(STREAM_PROBE_DATA),
                             settings.model.vocab_size)
    save_probe_set(probe, out_dir / "probe_set.jsonl")
    manifest.add("probe_set.jsonl")
    data = make_task_data(settings.task, RngState(settings.seed).child(STREAM_TASK_DATA),
                          settings.model.vocab_size, settings.train_size,
                          settings.eval_size)
    save_probe_set(data.train, out_dir / "train_data.jsonl")
    save_probe_set(data.eval, out_dir / "eval_data.jsonl")
    manifest.add("train_data.jsonl")
    manifest.add("eval_data.jsonl")
    manifest.write(out_dir)
    print(f"wrote probe/train/eval sets to {out_dir}")
    return 0


def cmd_init_model(args, settings=None) -> int:
    settings = _resolve_settings(args) if settings is None else settings
    if not args.pretrained:
        settings = _replace(settings, pretrain_steps=0)
    out_dir = _out_dir(args)
    manifest = Manifest("init-model", settings, {})
    from .model import init_params
    params = init_params(settings.model, RngState(settings.seed).child(STREAM_MODEL))
    if settings.pretrain_steps > 0:
        spec = TaskSpec(name="copy", copy_prompt_len=settings.task.copy_prompt_len)
        data = make_task_data(spec, RngState(settings.seed).child(STREAM_TASK_DATA),
                              settings.model.vocab_size,
                              settings.train_size, settings.eval_size)
        curve = pretrain_base(params, settings.pretrain_config(), data)
        write_csv(out_dir / "pretrain_loss.csv", ["step", "loss"],
                  [{"step": i, "loss": v} for i, v in enumerate(curve)])
        manifest.add("pretrain_loss.csv")
    save_checkpoint(params, out_dir / "model.ckpt")
    manifest.add("model.ckpt")
    manifest.write(out_dir)
    print(f"wrote checkpoint to {out_dir / 'model.ckpt'}")
    return 0


def cmd_probe(args, settings=None) -> int:
    settings = _resolve_settings(args) if settings is None else settings
    if settings.checkpoint is None:
        raise ConfigError(["probe needs a model checkpoint: set [files] checkpoint "
                           "or pass --checkpoint"])
    workers = _workers(args)
    out_dir = _out_dir(args)
    base = load_checkpoint(settings.checkpoint)
    if base.config != settings.model:
        settings = _replace(settings, model=base.config)
    manifest = Manifest("probe", settings,
                        {"checkpoint": settings.checkpoint,
                         "probe_set": settings.probe_set})
    _, sens, pm, dominant = _probe_analysis(settings, base, workers)
    _write_probe_reports(out_dir, manifest, settings, sens, pm, dominant)
    manifest.write(out_dir)
    print(f"dominant module: {dominant.name}")
    return 0


def cmd_validate(args, settings=None) -> int:
    settings = _resolve_settings(args) if settings is None else settings
    results = run_validation(seed=settings.seed, trials=settings.page_trials,
                             inject_fault=args.inject_fault,
                             workers=_workers(args))
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if args.out_dir is not None:
        out_dir = _out_dir(args)
        manifest = Manifest("validate", settings, {})
        write_csv(out_dir / "validation_report.csv", VALIDATION_FIELDS,
                  validation_rows(results))
        manifest.add("validation_report.csv")
        manifest.write(out_dir)
    if failed:
        print(f"FAILED: {', '.join(r.name for r in failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def _build_plan(settings: Settings, base: ModelParams,
                dominant: ModuleId | None) -> PlacementPlan:
    rng = RngState(settings.seed).child(STREAM_ADAPTERS)
    cfg = base.config
    rank, alpha = settings.rank, settings.lora_alpha
    placement = settings.placement
    if placement == "all":
        return plan_all(rng, cfg, rank, alpha)
    if placement == "layer-subset":
        if not settings.layers:
            raise ConfigError(["[train] layers must list layer indices for "
                               "layer-subset placement"])
        return plan_layer_subset(rng, cfg, settings.layers, rank, alpha)
    if placement == "kind-subset":
        if not settings.kinds:
            raise ConfigError(["[train] kinds must list projection kinds for "
                               "kind-subset placement"])
        kinds = [parse_kind(k) for k in settings.kinds]
        return plan_kind_subset(rng, cfg, kinds, rank, alpha)
    if placement == "dominant-only":
        return plan_dominant_only(rng, cfg, dominant, rank, alpha)
    return plan_full_weight_dominant(dominant)


def cmd_train(args, settings=None) -> int:
    settings = _resolve_settings(args) if settings is None else settings
    workers = _workers(args)
    out_dir = _out_dir(args)
    base = _load_base(settings)
    if settings.checkpoint is not None and base.config != settings.model:
        settings = _replace(settings, model=base.config)
    manifest = Manifest("train", settings,
                        {"checkpoint": settings.checkpoint,
                         "probe_set": settings.probe_set})

    dominant = None
    if settings.placement in ("dominant-only", "full-dominant"):
        _, sens, pm, dominant = _probe_analysis(settings, base, workers)
        _write_probe_reports(out_dir, manifest, settings, sens, pm, dominant)

    plan = _build_plan(settings, base, dominant)
    data = make_task_data(settings.task,
                          RngState(settings.seed).child(STREAM_TASK_DATA),
                          settings.model.vocab_size, settings.train_size,
                          settings.eval_size)
    result = run_experiment(base, plan, settings.train_config(), data)

    write_json(out_dir / "run_record.json", result.record.to_dict())
    manifest.add("run_record.json")
    cfg = settings.train_config()
    write_csv(out_dir / "loss_curve.csv", ["step", "lr", "loss"],
              [{"step": i, "lr": lr_at(i, cfg), "loss": v}
               for i, v in enumerate(result.record.loss_curve)])
    manifest.add("loss_curve.csv")
    for adapter in result.plan.adapters:
        name = f"adapter_{adapter.target.name}.ckpt"
        save_adapter(adapter, out_dir / name)
        manifest.add(name)
    if result.plan.full_weight_target is not None:
        target = result.plan.full_weight_target
        save_arrays(out_dir / "trained_module.ckpt",
                    {"kind": "trained-module", "target": target.name},
                    {"weight": result.params.proj[target]})
        manifest.add("trained_module.ckpt")
    manifest.write(out_dir)
    print(f"{result.record.placement}: final train loss "
          f"{result.record.final_train_loss:.4f}, eval loss "
          f"{result.record.final_eval_loss:.4f}")
    return 0


def _sweep_plans(settings: Settings, base: ModelParams,
                 dominant: ModuleId) -> list[PlacementPlan]:
    cfg = base.config
    rng = RngState(settings.seed).child(STREAM_ADAPTERS)
    rank, alpha = settings.rank, settings.lora_alpha
    kind_groups = {
        "down": [ProjKind.DOWN], "up": [ProjKind.UP], "gate": [ProjKind.GATE],
        "ffn-all": [ProjKind.UP, ProjKind.GATE, ProjKind.DOWN],
        "attn-all": [ProjKind.Q, ProjKind.K, ProjKind.V, ProjKind.O],
    }
    plans: list[PlacementPlan] = []
    stream = iter(rng.split(64))
    for kind_name in settings.sweep_kinds:
        if kind_name == "down":
            plans.append(plan_dominant_only(next(stream), cfg, dominant, rank, alpha))
        else:
            plans.append(plan_kind_subset(next(stream), cfg, kind_groups[kind_name],
                                          rank, alpha, layers=[dominant.layer]))
    for layer_name in settings.sweep_layers:
        if layer_name == "mid":
            layer = cfg.n_layers // 2
        elif layer_name == "last":
            layer = cfg.n_layers - 1
        else:
            layer = int(layer_name)
        plans.append(plan_kind_subset(next(stream), cfg, [ProjKind.DOWN], rank,
                                      alpha, layers=[layer]))
    for r in settings.sweep_ranks:
        plans.append(plan_dominant_only(next(stream), cfg, dominant, r, 2.0 * r))
    return plans


def cmd_sweep(args, settings=None) -> int:
    settings = _resolve_settings(args) if settings is None else settings
    if not (settings.sweep_kinds or settings.sweep_layers or settings.sweep_ranks):
        raise ConfigError(["[sweep] lists no plans: set ranks, kinds, or layers"])
    workers = _workers(args)
    out_dir = _out_dir(args)
    base = _load_base(settings)
    if settings.checkpoint is not None and base.config != settings.model:
        settings = _replace(settings, model=base.config)
    manifest = Manifest("sweep", settings,
                        {"checkpoint": settings.checkpoint,
                         "probe_set": settings.probe_set})
    _, sens, pm, dominant = _probe_analysis(settings, base, workers)
    _write_probe_reports(out_dir, manifest, settings, sens, pm, dominant)

    plans = _sweep_plans(settings, base, dominant)
    data = make_task_data(settings.task,
                          RngState(settings.seed).child(STREAM_TASK_DATA),
                          settings.model.vocab_size, settings.train_size,
                          settings.eval_size)
    results = placement_sweep(base, plans, settings.train_config(), data)
    records = [r.record for r in results]
    write_csv(out_dir / "sweep_table.csv", COMPARISON_FIELDS, comparison_rows(records))
    manifest.add("sweep_table.csv")
    write_json(out_dir / "run_records.json", [r.to_dict() for r in records])
    manifest.add("run_records.json")
    manifest.write(out_dir)
    for row in comparison_rows(records):
        print(f"{row['plan']:48s} params={row['trainable_params']:>8d} "
              f"eval={row['final_eval_loss']:.4f}")
    return 0


def cmd_rerun(args) -> int:
    manifest = read_json(args.manifest)
    settings = settings_from_dict(manifest["settings"])
    command = manifest["command"]
    if command not in _HANDLERS:
        raise ConfigError([f"manifest names unknown command {command!r}"])
    sub = argparse.Namespace(
        config=None, seed=None, trials=None, restrict_kind=None,
        checkpoint=None, probe_set=None,
        out_dir=args.out_dir, workers=args.workers,
        deterministic=args.deterministic,
        pretrained=settings.pretrain_steps > 0, inject_fault=None,
    )
    return _HANDLERS[command](sub, settings=settings)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="domlora",
        description="Gradient-energy probing and dominant-module adapter "
                    "placement on a toy decoder transformer.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="INI settings file (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out-dir", required=out_required,
                       default=None, help="directory for output files")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers for per-sample gradient jobs")
        p.add_argument("--deterministic", action="store_true",
                       help="force single-process execution")

    p = sub.add_parser("gen-data", help="write synthetic probe/task sets")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("init-model", help="write a fresh toy checkpoint")
    common(p)
    p.add_argument("--pretrained", action="store_true",
                   help="pretrain on the copy task before saving")
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("probe", help="compute sensitivity and adapter-energy reports")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint (overrides [files])")
    p.add_argument("--probe-set", help="probe-set file (overrides [files])")
    p.add_argument("--restrict-kind",
                   choices=["q", "k", "v", "o", "up", "gate", "down", "none"],
                   help="projection kind eligible for dominant selection")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("validate", help="run the property-check suite")
    common(p, out_required=False)
    p.add_argument("--trials", type=int, help="Monte Carlo trials for the checks")
    p.add_argument("--inject-fault", choices=["lemma1-sign"],
                   help="test-only: corrupt one analytic gradient")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="fine-tune under the configured placement")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint (overrides [files])")
    p.add_argument("--probe-set", help="probe-set file (overrides [files])")
    p.add_argument("--restrict-kind",
                   choices=["q", "k", "v", "o", "up", "gate", "down", "none"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="compare placements, layers, and ranks")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint (overrides [files])")
    p.add_argument("--probe-set", help="probe-set file (overrides [files])")
    p.add_argument("--restrict-kind",
                   choices=["q", "k", "v", "o", "up", "gate", "down", "none"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rerun", help="replay a manifest into a new directory")
    p.add_argument("manifest", help="path to a manifest.json from a previous run")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for line in exc.errors:
            print(f"error: {line}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "init-model": cmd_init_model,
    "probe": cmd_probe,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "validate": cmd_validate,
}


if __name__ == "__main__":
    sys.exit(main())
