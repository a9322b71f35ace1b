"""Command-line front end.

Every command resolves its settings as flag > config file > built-in default,
writes the resolved settings verbatim to ``run_config.json`` in the output
directory, and produces byte-identical artifacts when rerun with the same
inputs. Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime/numerical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import alignment as al
from . import backbone as bb
from . import evalkit as ek
from . import flow as fl
from . import guidance as gd
from . import numerics as nm
from . import perflow as pf
from . import synthvox as sv
from .errors import ConfigError, NumericsError, SparseflowError

THREADS_ENV = "SPARSEFLOW_THREADS"

TASK_KEYS = ("seed", "vocab_size", "latent_channels", "frame_rate",
             "style_count", "prosody_amplitude", "ramp_rate")

SAMPLING_DEFAULTS = {
    "seed": 4475,
    "steps": 25,
    "windows": 0,  # 0 = plain Euler sampling; K > 0 = one step per window
    "alignment": al.MODE_SPARSE,
    "guidance": ek.GUIDANCE_MULTI,
    "preset": None,
    "alpha_spk": None,
    "alpha_txt": None,
    "alpha": 3.5,  # two-point guidance scale when guidance == standard
    "gamma": 0.5,
    "duration": "oracle",
    "duration_factor": 1.0,
    "duration_noise": 0.0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are 1
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def _read_json(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return raw


def resolve_config(args, defaults: dict) -> dict:
    """flag > config file > default. Unknown config-file keys are rejected."""
    cfg = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path is not None:
        for key, val in _read_json(config_path).items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}; "
                                  f"expected one of {sorted(defaults)}")
            cfg[key] = val
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def validate_sampling(cfg: dict) -> None:
    if cfg["alignment"] not in al.MODES:
        raise ConfigError(f"alignment must be one of {al.MODES}")
    if cfg["guidance"] not in ek.GUIDANCES:
        raise ConfigError(f"guidance must be one of {ek.GUIDANCES}")
    if cfg["guidance"] == ek.GUIDANCE_NONE and (
            cfg["alpha_spk"] is not None or cfg["alpha_txt"] is not None
            or cfg["preset"] is not None):
        raise ConfigError("guidance 'none' is a single unguided pass; "
                          "it takes no scales or preset")
    if cfg["duration"] not in ("oracle", "predicted"):
        raise ConfigError("duration must be 'oracle' or 'predicted'")
    if not 0.0 < cfg["gamma"] < 1.0:
        raise ConfigError(f"gamma {cfg['gamma']} outside (0, 1)")
    if not 0.0 <= cfg["duration_noise"] < 1.0:
        raise ConfigError(f"duration_noise {cfg['duration_noise']} outside [0, 1)")
    if cfg["duration_factor"] <= 0.0:
        raise ConfigError(f"duration_factor must be positive, got {cfg['duration_factor']}")
    if int(cfg["steps"]) < 1 or int(cfg["windows"]) < 0:
        raise ConfigError("steps must be >= 1 and windows >= 0")


def _scales_for(cfg: dict) -> gd.GuidanceScales:
    if cfg["guidance"] == ek.GUIDANCE_NONE:
        return gd.GuidanceScales(1.0, 1.0)
    return gd.resolve_scales(cfg["preset"], cfg["alpha_spk"], cfg["alpha_txt"])


def _synth_kwargs(cfg: dict) -> dict:
    kw = dict(gamma=float(cfg["gamma"]), mode=cfg["alignment"],
              guidance=cfg["guidance"], steps=int(cfg["steps"]),
              alpha=float(cfg["alpha"]), scales=_scales_for(cfg),
              duration_factor=float(cfg["duration_factor"]),
              duration_noise=float(cfg["duration_noise"]))
    if int(cfg["windows"]) > 0:
        kw["partition"] = pf.WindowPartition(int(cfg["windows"]))
    return kw


def thread_cap() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def apply_thread_cap() -> None:
    n = thread_cap()
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_run_config(out_dir: Path, command: str, cfg: dict) -> None:
    payload = {"command": command, **{k: cfg[k] for k in sorted(cfg)}}
    (out_dir / "run_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_task(path) -> tuple[sv.TaskSpec, dict]:
    kwargs = _read_json(path)
    for key in kwargs:
        if key not in TASK_KEYS:
            raise ConfigError(f"unknown task key {key!r}; expected one of {TASK_KEYS}")
    return sv.make_task_spec(**kwargs), kwargs


def _task_kwargs(task: sv.TaskSpec) -> dict:
    return {"seed": task.seed, "vocab_size": task.vocab_size,
            "latent_channels": task.latent_channels, "frame_rate": task.frame_rate,
            "style_count": task.style_count,
            "prosody_amplitude": task.prosody_amplitude, "ramp_rate": task.ramp_rate}


def _bconfig_to_dict(cfg: bb.BackboneConfig) -> dict:
    d = asdict(cfg)
    d["mask_ratio_range"] = list(d["mask_ratio_range"])
    return d


def _bconfig_from_dict(d: dict) -> bb.BackboneConfig:
    d = dict(d)
    d["mask_ratio_range"] = tuple(d["mask_ratio_range"])
    return bb.BackboneConfig(**d)


def _load_model(checkpoint_dir) -> tuple[dict, bb.BackboneConfig, sv.TaskSpec, dict]:
    path = Path(checkpoint_dir)
    if not (path / "config.json").exists():
        raise ConfigError(f"no checkpoint at {path}")
    params, meta = nm.load_checkpoint(path)
    if "backbone" not in meta or "task" not in meta:
        raise ConfigError(f"checkpoint {path} lacks backbone/task metadata")
    return (params, _bconfig_from_dict(meta["backbone"]),
            sv.make_task_spec(**meta["task"]), meta)


def _load_data(data_dir) -> tuple[sv.TaskSpec, dict, list[sv.Utterance]]:
    path = Path(data_dir)
    if not (path / "dataset.jsonl").exists():
        raise ConfigError(f"no dataset at {path}")
    task, kwargs = _load_task(path / "task.json")
    return task, kwargs, sv.load_dataset(path)


def _duration_fn(cfg: dict, task: sv.TaskSpec, dataset: list[sv.Utterance]):
    """None for oracle durations; otherwise a deterministic predictor hook."""
    if cfg["duration"] == "oracle":
        return None
    if not dataset:
        raise ConfigError("predicted durations need a training dataset")
    pred = al.init_duration_predictor(task.vocab_size, task.style_count,
                                      seed=int(cfg["seed"]))
    examples = [(u.tokens, u.durations, _style_onehot(task, u.style_id))
                for u in dataset]
    al.train_duration_predictor(pred, examples, steps=800, seed=int(cfg["seed"]))

    def predict(utt: sv.Utterance) -> list[int]:
        p = ek.prompt_token_count(len(utt.tokens), float(cfg["gamma"]))
        return al.predict_durations(pred, utt.tokens[p:],
                                    _style_onehot(task, utt.style_id))

    return predict


def _style_onehot(task: sv.TaskSpec, style_id: int) -> np.ndarray:
    vec = np.zeros(task.style_count)
    vec[style_id] = 1.0
    return vec


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    defaults = {"seed": 4475, "count": 0, "len_min": 2, "len_max": 12}
    cfg = resolve_config(args, defaults)
    count = int(cfg["count"])
    if count < 0:
        raise ConfigError(f"count must be >= 0, got {count}")
    if args.spec is not None:
        task, task_kwargs = _load_task(args.spec)
    else:
        task = sv.make_task_spec()
        task_kwargs = {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    utts = sv.sample_dataset(task, count,
                             len_range=(int(cfg["len_min"]), int(cfg["len_max"])),
                             seed=int(cfg["seed"]))
    sv.save_dataset(out, utts)
    (out / "task.json").write_text(
        json.dumps(_task_kwargs(task), indent=2, sort_keys=True) + "\n")

    files = sorted(p.name for p in out.iterdir()
                   if p.name not in ("manifest.json", "run_config.json"))
    manifest = {"count": count, "seed": int(cfg["seed"]),
                "task": task_kwargs,
                "files": {name: _sha256(out / name) for name in files}}
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write_run_config(out, "gen_data", cfg)
    print(f"wrote {count} utterances to {out}")
    return 0


def cmd_train(args) -> int:
    defaults = {"seed": 4475, "steps": 20_000, "lr": 1e-3, "warmup_steps": 500,
                "batch_size": 8, "alignment": al.MODE_SPARSE, "schedule": "linear",
                "dropout": True, "layers": 4, "heads": 4, "model_dim": 64,
                "loss_every": 50, "checkpoint_every": 500, "stretch_aug": 0.0}
    cfg = resolve_config(args, defaults)
    if cfg["alignment"] not in al.MODES:
        raise ConfigError(f"alignment must be one of {al.MODES}")
    if not 0.0 <= float(cfg["stretch_aug"]) <= 1.0:
        raise ConfigError(f"stretch-aug must be in [0, 1], got {cfg['stretch_aug']}")
    task, task_kwargs, dataset = _load_data(args.data)
    if not dataset:
        raise ConfigError("training needs a nonempty dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    bconfig = bb.BackboneConfig(layers=int(cfg["layers"]), heads=int(cfg["heads"]),
                                model_dim=int(cfg["model_dim"]),
                                latent_channels=task.latent_channels,
                                vocab_size=task.vocab_size)
    tconfig = fl.TrainConfig(backbone=bconfig, steps=int(cfg["steps"]),
                             lr=float(cfg["lr"]), warmup_steps=int(cfg["warmup_steps"]),
                             batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]),
                             mode=cfg["alignment"],
                             schedule=fl.FlowSchedule(cfg["schedule"]),
                             loss_every=int(cfg["loss_every"]),
                             checkpoint_every=int(cfg["checkpoint_every"]),
                             condition_dropout=bool(cfg["dropout"]),
                             stretch_prob=float(cfg["stretch_aug"]), task=task)
    result = fl.train_loop(tconfig, dataset)

    meta = {"task": _task_kwargs(task), "backbone": _bconfig_to_dict(bconfig),
            "train": {k: cfg[k] for k in sorted(cfg)},
            "steps_run": result.steps_run, "diverged": result.diverged}
    nm.save_checkpoint(out / "checkpoint", result.params, meta, dtype="f64")
    fl.write_loss_csv(out / "losses.csv", result.losses)
    _write_run_config(out, "train", cfg)
    if result.diverged:
        raise NumericsError(f"training diverged at step {result.steps_run}; "
                            f"last good checkpoint written to {out / 'checkpoint'}")
    print(f"trained {result.steps_run} steps; checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_distill(args) -> int:
    defaults = {"seed": 4475, "k_windows": 8, "teacher_steps": 8, "steps": 2000,
                "lr": 5e-4, "warmup_steps": 100, "batch_size": 4,
                "schedule": "linear", "alignment": al.MODE_SPARSE,
                "cfg_in_teacher": False, "dropout": True}
    cfg = resolve_config(args, defaults)
    if cfg["alignment"] not in al.MODES:
        raise ConfigError(f"alignment must be one of {al.MODES}")
    teacher_params, bconfig, task, teacher_meta = _load_model(args.teacher)
    _, _, dataset = _load_data(args.data)
    if not dataset:
        raise ConfigError("distillation needs a nonempty dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    dconfig = pf.DistillConfig(k_windows=int(cfg["k_windows"]),
                               teacher_steps=int(cfg["teacher_steps"]),
                               steps=int(cfg["steps"]), lr=float(cfg["lr"]),
                               warmup_steps=int(cfg["warmup_steps"]),
                               batch_size=int(cfg["batch_size"]),
                               seed=int(cfg["seed"]), schedule=cfg["schedule"],
                               mode=cfg["alignment"],
                               cfg_in_teacher=bool(cfg["cfg_in_teacher"]),
                               condition_dropout=bool(cfg["dropout"]))
    result = pf.distill(dconfig, bconfig, teacher_params, dataset)

    meta = {"task": teacher_meta["task"], "backbone": teacher_meta["backbone"],
            "distill": {k: cfg[k] for k in sorted(cfg)},
            "steps_run": result.steps_run, "diverged": result.diverged}
    nm.save_checkpoint(out / "checkpoint", result.student_params, meta, dtype="f64")
    fl.write_loss_csv(out / "losses.csv", result.losses)
    _write_run_config(out, "distill", cfg)
    if result.diverged:
        raise NumericsError(f"distillation diverged at step {result.steps_run}; "
                            f"last good checkpoint written to {out / 'checkpoint'}")
    print(f"distilled {result.steps_run} steps; checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_sample(args) -> int:
    defaults = dict(SAMPLING_DEFAULTS, index=0)
    cfg = resolve_config(args, defaults)
    validate_sampling(cfg)
    params, bconfig, task, _ = _load_model(args.checkpoint)
    _, _, dataset = _load_data(args.data)
    index = int(cfg["index"])
    if not 0 <= index < len(dataset):
        raise ConfigError(f"index {index} outside dataset of {len(dataset)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    utt = dataset[index]
    duration_fn = _duration_fn(cfg, task, dataset)
    override = None if duration_fn is None else duration_fn(utt)
    rng = np.random.default_rng((int(cfg["seed"]), 7, index))
    res = ek.synthesize(task, bconfig, params, utt, rng=rng,
                        target_durations=override, **_synth_kwargs(cfg))

    nm.save_array(out / "sample.bin", res.full.values, name="sample", dtype="f64")
    digest = _sha256(out / "sample.bin")
    payload = {"sha256": digest, "decoded": res.decoded,
               "target_tokens": res.target_tokens,
               "token_error_rate": res.token_error_rate,
               "duration_ratio": res.duration_ratio, "meta": res.meta}
    (out / "sample.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write_run_config(out, "sample", cfg)
    print(digest)
    return 0


def cmd_eval(args) -> int:
    defaults = dict(SAMPLING_DEFAULTS, sweep="none", grid="", limit=0)
    cfg = resolve_config(args, defaults)
    validate_sampling(cfg)
    if cfg["sweep"] not in ("none", "duration", "accent"):
        raise ConfigError("sweep must be one of none/duration/accent")
    oracle = bool(getattr(args, "oracle", None))
    if not oracle and args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint (or --oracle)")
    task, _, dataset = _load_data(args.data)
    limit = int(cfg["limit"])
    if limit > 0:
        dataset = dataset[:limit]
    if not dataset:
        raise ConfigError("evaluation needs a nonempty dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if oracle:
        report = ek.oracle_report(task, dataset, gamma=float(cfg["gamma"]))
        row = ek.report_to_dict(report)
        ek.write_report_csv(out / "report.csv", [row])
        ek.write_summary_json(out / "summary.json", row)
        _write_run_config(out, "eval", cfg)
        print(f"oracle token_error_rate {report.token_error_rate}")
        return 0

    params, bconfig, _, _ = _load_model(args.checkpoint)
    kwargs = _synth_kwargs(cfg)
    if cfg["sweep"] == "duration":
        factors = _parse_grid(cfg["grid"], default=(0.5, 1.0, 2.0))
        kwargs.pop("duration_factor")
        rows = ek.duration_control_eval(task, bconfig, params, dataset, factors,
                                        seed=int(cfg["seed"]), **kwargs)
        ek.write_report_csv(out / "report.csv", rows)
        ek.write_summary_json(out / "summary.json", {"rows": rows})
    elif cfg["sweep"] == "accent":
        grid = _parse_grid(cfg["grid"], default=(1.5, 5.0))
        accented = [u for u in dataset if u.style_id != task.standard_style]
        if not accented:
            raise ConfigError("accent sweep needs non-standard-style utterances")
        alpha_spk = kwargs["scales"].alpha_spk
        for key in ("scales", "guidance", "duration_factor", "duration_noise"):
            kwargs.pop(key)
        sweep = ek.accent_sweep(task, bconfig, params, accented, grid,
                                alpha_spk=alpha_spk, seed=int(cfg["seed"]), **kwargs)
        ek.write_report_csv(out / "report.csv", sweep["rows"])
        ek.write_confusion_csv(out / "confusion.csv", sweep["confusion_oracle"])
        ek.write_summary_json(out / "summary.json", {"rows": sweep["rows"]})
    else:
        duration_fn = _duration_fn(cfg, task, dataset)
        report = ek.evaluate_model(task, bconfig, params, dataset,
                                   seed=int(cfg["seed"]), duration_fn=duration_fn,
                                   **kwargs)
        row = ek.report_to_dict(report)
        ek.write_report_csv(out / "report.csv", [row])
        ek.write_summary_json(out / "summary.json", row)
        print(f"token_error_rate {report.token_error_rate} "
              f"style_similarity {report.style_similarity}")
    _write_run_config(out, "eval", cfg)
    return 0


def cmd_ablate(args) -> int:
    defaults = {"seed": 4475, "steps": 25, "gamma": 0.5,
                "noise_grid": "0.0,0.1,0.2,0.3", "limit": 0}
    cfg = resolve_config(args, defaults)
    try:
        entries_spec = json.loads(Path(args.entries).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read entries {args.entries}: {exc}") from exc
    if isinstance(entries_spec, dict):
        entries_spec = entries_spec.get("entries")
    if not isinstance(entries_spec, list) or not entries_spec:
        raise ConfigError("entries file must hold a nonempty list of configs")
    task, _, dataset = _load_data(args.data)
    limit = int(cfg["limit"])
    if limit > 0:
        dataset = dataset[:limit]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    entries = []
    bconfig = None
    for item in entries_spec:
        if "name" not in item or "checkpoint" not in item:
            raise ConfigError("each ablation entry needs 'name' and 'checkpoint'")
        params, this_bconfig, _, _ = _load_model(item["checkpoint"])
        if bconfig is None:
            bconfig = this_bconfig
        elif this_bconfig != bconfig:
            raise ConfigError("ablation entries must share one backbone shape")
        acfg = ek.AblationConfig(
            name=str(item["name"]), mode=item.get("mode", al.MODE_SPARSE),
            guidance=item.get("guidance", ek.GUIDANCE_MULTI),
            alpha_spk=float(item.get("alpha_spk", 3.5)),
            alpha_txt=float(item.get("alpha_txt", 2.5)),
            alpha=float(item.get("alpha", 3.5)))
        entries.append((acfg, params))

    noise_grid = _parse_grid(cfg["noise_grid"], default=(0.0, 0.1, 0.2, 0.3))
    rows = ek.ablation_run(task, bconfig, entries, dataset, seed=int(cfg["seed"]),
                           noise_grid=noise_grid, steps=int(cfg["steps"]),
                           gamma=float(cfg["gamma"]))
    ek.write_report_csv(out / "ablation.csv", rows)
    ek.write_summary_json(out / "summary.json", {"rows": rows})
    _write_run_config(out, "ablate", cfg)
    print(f"wrote {len(rows)} ablation rows to {out / 'ablation.csv'}")
    return 0


def cmd_dump_attn(args) -> int:
    defaults = {"seed": 4475, "index": 0, "t": 0.5, "gamma": 0.5,
                "alignment": al.MODE_SPARSE}
    cfg = resolve_config(args, defaults)
    if cfg["alignment"] not in al.MODES:
        raise ConfigError(f"alignment must be one of {al.MODES}")
    if not 0.0 <= float(cfg["t"]) <= 1.0:
        raise ConfigError(f"t {cfg['t']} outside [0, 1]")
    params, bconfig, task, _ = _load_model(args.checkpoint)
    _, _, dataset = _load_data(args.data)
    index = int(cfg["index"])
    if not 0 <= index < len(dataset):
        raise ConfigError(f"index {index} outside dataset of {len(dataset)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    utt = dataset[index]
    t = float(cfg["t"])
    p = ek.prompt_token_count(len(utt.tokens), float(cfg["gamma"]))
    n_prompt = sum(utt.durations[:p])
    z1 = utt.latents.values
    labels = fl.labels_for_mode(cfg["alignment"], utt, None)
    prompt_mask = np.arange(z1.shape[0]) < n_prompt
    cond = bb.ConditionBundle(align_labels=labels, prompt_latents=z1,
                              prompt_mask=prompt_mask, t=t)
    rng = np.random.default_rng((int(cfg["seed"]), 7, index))
    z_t = fl.interpolate(fl.FlowSchedule(fl.LINEAR), rng.standard_normal(z1.shape),
                         z1, t)
    z_t = np.where(prompt_mask[:, None], z1, z_t)

    recorder = bb.AttentionRecorder()
    bb.forward(bconfig, params, z_t, cond, recorder)
    bb.save_attention(out, recorder)
    _write_run_config(out, "dump_attn", cfg)
    n_maps = len(recorder.entries)
    print(f"wrote {n_maps} attention maps to {out}")
    return 0


def _parse_grid(raw, default) -> list[float]:
    if raw is None or raw == "":
        return [float(x) for x in default]
    try:
        vals = [float(x) for x in str(raw).split(",") if x.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad grid {raw!r}: {exc}") from exc
    if not vals:
        raise ConfigError(f"bad grid {raw!r}: no values")
    return vals


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_sampling_flags(p: _Parser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--windows", type=int)
    p.add_argument("--alignment", choices=al.MODES)
    p.add_argument("--guidance", choices=ek.GUIDANCES)
    p.add_argument("--preset")
    p.add_argument("--alpha-spk", dest="alpha_spk", type=float)
    p.add_argument("--alpha-txt", dest="alpha_txt", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--duration", choices=("oracle", "predicted"))
    p.add_argument("--duration-factor", dest="duration_factor", type=float)
    p.add_argument("--duration-noise", dest="duration_noise", type=float)


def build_parser() -> _Parser:
    parser = _Parser(prog="sparseflow",
                     description="Sparse-alignment latent flow matching on a "
                                 "synthetic token-to-latent task.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen_data", help="render a deterministic dataset")
    p.add_argument("--spec", help="task spec JSON (seed, vocab_size, ...)")
    p.add_argument("--count", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--len-min", dest="len_min", type=int)
    p.add_argument("--len-max", dest="len_max", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the drift estimator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    for flag, typ in (("--seed", int), ("--steps", int), ("--lr", float),
                      ("--warmup-steps", int), ("--batch-size", int),
                      ("--layers", int), ("--heads", int), ("--model-dim", int),
                      ("--loss-every", int), ("--checkpoint-every", int),
                      ("--stretch-aug", float)):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ)
    p.add_argument("--alignment", choices=al.MODES)
    p.add_argument("--schedule", choices=(fl.LINEAR, fl.VP))
    p.add_argument("--no-dropout", dest="dropout", action="store_const", const=False)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="distill a few-step student")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    for flag, typ in (("--seed", int), ("--k-windows", int), ("--teacher-steps", int),
                      ("--steps", int), ("--lr", float), ("--warmup-steps", int),
                      ("--batch-size", int)):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ)
    p.add_argument("--alignment", choices=al.MODES)
    p.add_argument("--schedule", choices=(fl.LINEAR, fl.VP))
    p.add_argument("--cfg-in-teacher", dest="cfg_in_teacher",
                   action="store_const", const=True)
    p.add_argument("--no-dropout", dest="dropout", action="store_const", const=False)
    p.add_argument("--config")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sample", help="generate one continuation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int)
    _add_sampling_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a model or the oracle renders")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_const", const=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", choices=("none", "duration", "accent"))
    p.add_argument("--grid")
    p.add_argument("--limit", type=int)
    _add_sampling_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run conditioning/guidance ablations")
    p.add_argument("--entries", required=True,
                   help="JSON list of {name, checkpoint, mode, guidance, ...}")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--noise-grid", dest="noise_grid")
    p.add_argument("--limit", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump_attn", help="record attention maps for one forward")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int)
    p.add_argument("--t", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alignment", choices=al.MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_dump_attn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        apply_thread_cap()
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SparseflowError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
