"""Dataset generation, training, evaluation and ablation runs built from a :class:`RunConfig`."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio
from .config import RunConfig
from .geometry import Pose
from .gpc import point_source
from .metrics import CSV_COLUMNS, GroundTruth, MetricReport, Prediction, evaluate
from .model import PoseModel
from .optim import Optimizer
from .stage1 import PHASES, Stage1Config, Stage1Model, Stage1State, phase_optimizer, run_stage1
from .stage2 import Stage2Item, TrainState, init_model, predict_items, train_stage2
from .synth import CATEGORY_NAMES, DEFAULT_K, GENERATOR_VERSION, EmptyMaskError, generate_scene, instance_seed

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
MAX_SCENE_ATTEMPTS = 16


class ValidationError(ValueError):
    """Bad user input: existing output, malformed or incompatible artifacts."""


class DependencyError(ValidationError):
    """A required upstream artifact (e.g. the stage-1 checkpoint) is missing."""


# ---------------------------------------------------------------- helpers

def prepare_output(out, overwrite: bool) -> Path:
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not overwrite:
            raise ValidationError(f"output {out} exists and is not empty; pass --overwrite to replace it")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_csv(path) -> list[dict]:
    """Inverse of :func:`write_csv` for loss logs (blank cells are dropped)."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({k: (v if k == "phase" else int(v) if k == "step" else float(v))
                         for k, v in r.items() if v != ""})
    return rows


# ---------------------------------------------------------------- dataset

@dataclass(frozen=True)
class SceneSpec:
    split: str
    category: str
    index: int
    instance_seed: int
    scene_seed: int

    @property
    def scene_id(self) -> str:
        return f"{self.category}_{self.index:05d}"


def dataset_plan(cfg: RunConfig) -> list[SceneSpec]:
    """Every scene to generate; train and test draw from disjoint instance index ranges."""
    plan = []
    for split_code, split in enumerate(SPLITS):
        count = cfg.train_scenes_per_category if split == "train" else cfg.test_scenes_per_category
        n_inst = cfg.train_instances_per_category if split == "train" else cfg.test_instances_per_category
        offset = 0 if split == "train" else cfg.train_instances_per_category
        for c, cat in enumerate(CATEGORY_NAMES):
            for k in range(count):
                inst = instance_seed(cfg.seed, cat, offset + k % n_inst)
                scene = int(np.random.SeedSequence([cfg.seed, split_code, c, k]).generate_state(1)[0])
                plan.append(SceneSpec(split, cat, k, inst, scene))
    return plan


def instance_sets(plan: list[SceneSpec]) -> dict[str, dict[str, list[int]]]:
    out: dict[str, dict[str, list[int]]] = {s: {c: [] for c in CATEGORY_NAMES} for s in SPLITS}
    for sp in plan:
        out[sp.split][sp.category].append(sp.instance_seed)
    return {s: {c: sorted(set(v)) for c, v in d.items()} for s, d in out.items()}


def generate_dataset(cfg: RunConfig, out, overwrite: bool = False) -> Path:
    plan = dataset_plan(cfg)
    seeds = instance_sets(plan)
    for cat in CATEGORY_NAMES:
        shared = set(seeds["train"][cat]) & set(seeds["test"][cat])
        if shared:
            raise ValidationError(f"{cat}: train and test instance seeds collide: {sorted(shared)}")
    out = prepare_output(out, overwrite)
    params = cfg.scene_params()
    scenes: dict[str, list[str]] = {s: [] for s in SPLITS}
    for n, sp in enumerate(plan):
        bundle = None
        for attempt in range(MAX_SCENE_ATTEMPTS):
            seed = sp.scene_seed if attempt == 0 else sp.scene_seed + 7919 * attempt
            try:
                bundle = generate_scene(sp.category, sp.instance_seed, seed, DEFAULT_K, params, sp.scene_id)
                break
            except EmptyMaskError:
                log.warning("%s/%s: empty mask on attempt %d, resampling", sp.split, sp.scene_id, attempt)
        if bundle is None:
            raise RuntimeError(f"could not render a visible object for {sp.split}/{sp.scene_id}")
        dataio.save_scene(out / sp.split / sp.scene_id, bundle)
        scenes[sp.split].append(sp.scene_id)
        if (n + 1) % 500 == 0:
            log.info("generated %d/%d scenes", n + 1, len(plan))
    counts = {s: {c: sum(1 for sp in plan if sp.split == s and sp.category == c) for c in CATEGORY_NAMES}
              for s in SPLITS}
    dataio.dump_json(out / "dataset.json", {
        "generator_version": GENERATOR_VERSION,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "K": DEFAULT_K.to_dict(),
        "counts": counts,
        "instance_seeds": seeds,
        "scenes": scenes,
    })
    (out / "config.txt").write_text(cfg.to_text())
    return out


def dataset_info(dataset) -> dict:
    path = Path(dataset) / "dataset.json"
    if not path.is_file():
        raise DependencyError(f"{dataset} is not a dataset directory (dataset.json missing)")
    return dataio.load_json(path)


def scene_ids(dataset, split: str, categories=CATEGORY_NAMES) -> list[str]:
    ids = dataset_info(dataset)["scenes"][split]
    return [i for i in ids if i.rsplit("_", 1)[0] in categories]


def load_bundles(dataset, split: str, ids: list[str]):
    return [dataio.load_scene(Path(dataset) / split / i)[0] for i in ids]


def stage1_subset(ids: list[str], count: int) -> list[str]:
    """``count`` ids spread evenly over the list (all of them when there are fewer)."""
    if count >= len(ids):
        return list(ids)
    pick = np.linspace(0, len(ids) - 1, count).round().astype(int)
    return [ids[i] for i in pick]


# ---------------------------------------------------------------- stage 1

STAGE1_COLUMNS = ["phase", "step", "lr", "L_d", "L_s", "L_con"]


def _stage1_manifest(cfg: RunConfig, state: Stage1State, dataset) -> dict:
    return {"kind": "stage1", "config_hash": cfg.hash(), "seed": cfg.seed,
            "dataset_config_hash": dataset_info(dataset)["config_hash"],
            "phase": state.phase, "phase_step": state.step, "steps_done": len(state.curves),
            "done": state.done, "skipped_samples": state.skipped,
            "stage1": {"hidden": cfg.s1_hidden, "layers": cfg.s1_layers, "consistency": cfg.consistency,
                       "w_con": cfg.w_con}}


def save_stage1(out: Path, cfg: RunConfig, state: Stage1State, dataset) -> None:
    tensors = {f"model/{k}": v for k, v in state.model.state().items()}
    if state.optimizer is not None:
        tensors.update({f"optim/{k}": v for k, v in state.optimizer.state().items()})
    dataio.save_checkpoint(out, tensors, _stage1_manifest(cfg, state, dataset))
    cols = STAGE1_COLUMNS if cfg.consistency else STAGE1_COLUMNS[:-1]
    write_csv(out / "loss_stage1.csv", state.curves, cols)


def load_stage1(path, cfg: RunConfig | None = None, expect_done: bool = True) -> tuple[Stage1State, dict]:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise DependencyError(f"stage-1 checkpoint not found at {path}")
    tensors, manifest = dataio.load_checkpoint(path)
    if manifest.get("kind") != "stage1":
        raise ValidationError(f"{path} is not a stage-1 checkpoint")
    if expect_done and not manifest["done"]:
        raise DependencyError(f"stage-1 checkpoint at {path} is incomplete; resume its training first")
    s1 = manifest["stage1"]
    s1cfg = cfg.stage1() if cfg is not None else Stage1Config(
        hidden=s1["hidden"], layers=s1["layers"], consistency=s1["consistency"], w_con=s1["w_con"])
    model = Stage1Model.create(s1cfg)
    model.load_state({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    state = Stage1State(model, None, manifest["phase"], manifest["phase_step"],
                        read_csv(path / "loss_stage1.csv"), manifest["skipped_samples"])
    optim = {k[len("optim/"):]: v for k, v in tensors.items() if k.startswith("optim/")}
    if optim and not state.done and cfg is not None:
        params = model.depth_net.parameters() + model.normal_net.parameters()
        state.optimizer = phase_optimizer(params, cfg.stage1(), state.phase)
        state.optimizer.load_state(optim)
    return state, manifest


def train_stage1_run(cfg: RunConfig, dataset, out, overwrite: bool = False, resume: bool = False,
                     stop_at: int | None = None) -> Stage1State:
    out = Path(out)
    state = None
    if resume and (out / "manifest.json").is_file():
        state, manifest = load_stage1(out, cfg, expect_done=False)
        if manifest["config_hash"] != cfg.hash():
            raise ValidationError("cannot resume: checkpoint was produced by a different config")
        log.info("resuming stage 1 at %s step %d", PHASES[min(state.phase, len(PHASES) - 1)], state.step)
    else:
        prepare_output(out, overwrite)
    ids = stage1_subset(scene_ids(dataset, "train"), cfg.s1_train_scenes)
    bundles = load_bundles(dataset, "train", ids)
    s1cfg = cfg.stage1()
    every = cfg.checkpoint_every
    while True:
        done_steps = len(state.curves) if state else 0
        target = done_steps + every if stop_at is None else min(done_steps + every, stop_at)
        state = run_stage1(bundles, s1cfg, state, stop_at=target, log_every=100)
        save_stage1(out, cfg, state, dataset)
        if state.done or (stop_at is not None and len(state.curves) >= stop_at):
            return state


# ---------------------------------------------------------------- stage 2

STAGE2_COLUMNS = ["step", "lr", "total", "rx", "rz", "ra", "t", "s", "conx", "conz"]


def make_items(stage1: Stage1Model, bundles, batch_size: int = 16) -> list[Stage2Item]:
    items = []
    for i in range(0, len(bundles), batch_size):
        chunk = bundles[i:i + batch_size]
        for b, (d, n) in zip(chunk, stage1.predict(chunk, batch_size)):
            items.append(Stage2Item(point_source(b, d, n), b.K, b.pose, b.symmetric, b.scene_id))
    return items


def model_groups(cfg: RunConfig) -> dict[str, tuple[str, ...]]:
    """Model name -> categories it covers."""
    if cfg.per_category:
        return {c: (c,) for c in CATEGORY_NAMES}
    return {"joint": CATEGORY_NAMES}


def save_stage2_model(out: Path, cfg: RunConfig, state: TrainState, total_steps: int) -> None:
    tensors = {f"model/{k}": v for k, v in state.model.state().items()}
    tensors.update({f"optim/{k}": v for k, v in state.optimizer.state().items()})
    manifest = {"kind": "stage2-model", "config_hash": cfg.hash(), "seed": cfg.seed, "step": state.step,
                "total_steps": total_steps, "done": state.step >= total_steps,
                "groups": list(cfg.groups()), "n_points": cfg.n_points,
                "layers": {k: list(v.shape) for k, v in state.model.state().items()}}
    dataio.save_checkpoint(out, tensors, manifest)
    write_csv(out / "loss_stage2.csv", state.curves, STAGE2_COLUMNS)


def load_stage2_model(path: Path, cfg: RunConfig, items=None) -> tuple[TrainState, dict]:
    tensors, manifest = dataio.load_checkpoint(path)
    s2 = cfg.stage2()
    model = PoseModel(s2.model, np.random.default_rng(cfg.seed))
    model.load_state({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    opt = Optimizer(model.parameters(), s2.optim(max(len(items) if items else 1, 1)))
    optim = {k[len("optim/"):]: v for k, v in tensors.items() if k.startswith("optim/")}
    if optim:
        opt.load_state(optim)
    curves = read_csv(path / "loss_stage2.csv") if (path / "loss_stage2.csv").is_file() else []
    return TrainState(model, opt, manifest["step"], curves), manifest


def train_stage2_run(cfg: RunConfig, dataset, stage1_dir, out, overwrite: bool = False, resume: bool = False,
                     stop_at: int | None = None, items: list[Stage2Item] | None = None) -> dict[str, TrainState]:
    """Train one model per category (or one joint model); returns the states by model name."""
    out = Path(out)
    s1_state, s1_manifest = load_stage1(stage1_dir, expect_done=True)
    resuming = resume and (out / "manifest.json").is_file()
    if resuming:
        top = dataio.load_json(out / "manifest.json")
        if top["config_hash"] != cfg.hash():
            raise ValidationError("cannot resume: checkpoint was produced by a different config")
    else:
        prepare_output(out, overwrite)
    if items is None:
        ids = scene_ids(dataset, "train")
        items = []
        for i in range(0, len(ids), 256):
            items.extend(make_items(s1_state.model, load_bundles(dataset, "train", ids[i:i + 256])))
    s2 = cfg.stage2()
    groups = model_groups(cfg)
    dataio.dump_json(out / "manifest.json", {
        "kind": "stage2", "config_hash": cfg.hash(), "seed": cfg.seed,
        "stage1_config_hash": s1_manifest["config_hash"], "models": {k: list(v) for k, v in groups.items()},
        "per_category": cfg.per_category})
    states = {}
    for name, cats in groups.items():
        sub = [it for it in items if it.category in cats]
        total = s2.epochs * s2.steps_per_epoch(len(sub))
        mdir = out / name
        state = None
        started = time.perf_counter()
        if resuming and (mdir / "manifest.json").is_file():
            state, _ = load_stage2_model(mdir, cfg, sub)
        if state is None:
            state = TrainState(init_model(sub, s2), None)
            state.optimizer = Optimizer(state.model.parameters(), s2.optim(len(sub)))
        while state.step < total and (stop_at is None or state.step < stop_at):
            target = state.step + cfg.checkpoint_every
            if stop_at is not None:
                target = min(target, stop_at)
            state = train_stage2(sub, s2, state, stop_at=target, log_every=100)
            save_stage2_model(mdir, cfg, state, total)
        if not (mdir / "manifest.json").is_file():
            save_stage2_model(mdir, cfg, state, total)
        log.info("stage-2 model %s: %d steps in %.1f s", name, state.step, time.perf_counter() - started)
        states[name] = state
    return states


def load_stage2(path, cfg: RunConfig) -> tuple[dict[str, PoseModel], dict]:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise DependencyError(f"stage-2 checkpoint not found at {path}")
    top = dataio.load_json(path / "manifest.json")
    if top.get("kind") != "stage2":
        raise ValidationError(f"{path} is not a stage-2 checkpoint")
    models = {}
    for name in top["models"]:
        state, _ = load_stage2_model(path / name, cfg)
        models[name] = state.model
    return models, top


# ---------------------------------------------------------------- evaluation

def evaluate_run(cfg: RunConfig, dataset, stage1_dir, stage2_dir, out, overwrite: bool = False,
                 oracle: bool = False) -> MetricReport:
    """Report on the test split. ``oracle`` scores the ground truth itself (a saturation check)."""
    out = prepare_output(out, overwrite)
    info = dataset_info(dataset)
    ids = scene_ids(dataset, "test")
    header = {"config_hash": cfg.hash(), "seed": cfg.seed, "dataset_hash": dataio.directory_hash(dataset),
              "dataset_config_hash": info["config_hash"], "oracle": oracle, "warnings": []}
    truth: dict[str, GroundTruth] = {}
    preds: dict[str, Prediction] = {}
    if oracle:
        for b in load_bundles(dataset, "test", ids):
            truth[b.scene_id] = GroundTruth(b.category, b.pose, b.symmetric, b.depth_gt, b.normal_gt, b.mask)
            preds[b.scene_id] = Prediction(Pose(b.pose.R, b.pose.t, b.pose.s), b.depth_gt, b.normal_gt)
    else:
        s1_state, s1_manifest = load_stage1(stage1_dir, expect_done=True)
        models, s2_manifest = load_stage2(stage2_dir, cfg)
        header["stage1_config_hash"] = s1_manifest["config_hash"]
        header["stage2_config_hash"] = s2_manifest["config_hash"]
        for what, h in (("stage-1", s1_manifest["config_hash"]), ("stage-2", s2_manifest["config_hash"])):
            if h != cfg.hash():
                msg = f"{what} checkpoint config hash differs from the evaluation config"
                log.warning(msg)
                header["warnings"].append(msg)
        items_by_model: dict[str, list[Stage2Item]] = {name: [] for name in models}
        owner = {c: name for name, cats in s2_manifest["models"].items() for c in cats}
        for i in range(0, len(ids), 128):
            chunk = load_bundles(dataset, "test", ids[i:i + 128])
            for b, (d, n) in zip(chunk, s1_state.model.predict(chunk)):
                truth[b.scene_id] = GroundTruth(b.category, b.pose, b.symmetric, b.depth_gt, b.normal_gt, b.mask)
                preds[b.scene_id] = Prediction(None, d, n)
                items_by_model[owner[b.category]].append(
                    Stage2Item(point_source(b, d, n), b.K, b.pose, b.symmetric, b.scene_id))
        for name, items in items_by_model.items():
            if not items:
                continue
            ests = predict_items(models[name], items, cfg.n_points, cfg.seed, cfg.groups())
            for it, est in zip(items, ests):
                preds[it.scene_id].pose = est.pose
    report = evaluate(preds, truth, header)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json())
    return report


# ---------------------------------------------------------------- ablation

ABLATION_COLUMNS = ["trial", "rgb", "ray", "depth", "normal", "consistency", "separate_category",
                    "3D25", "3D50", "3D75", "5deg5cm", "10deg5cm", "10deg10cm"]


def ablation_grid(cfg: RunConfig) -> list[RunConfig]:
    toggles = cfg.ablation_toggles()
    field_of = {"consistency": "consistency", "normal": "use_normal", "ray": "use_ray", "separate": "per_category"}
    trials = []
    for values in itertools.product((False, True), repeat=len(toggles)):
        trials.append(cfg.replace(**{field_of[t]: v for t, v in zip(toggles, values)}))
    return trials


def ablate_run(cfg: RunConfig, dataset, out, overwrite: bool = False) -> list[dict]:
    out = prepare_output(out, overwrite)
    rows = []
    stage1_dirs: dict[bool, Path] = {}
    for k, trial in enumerate(ablation_grid(cfg), 1):
        tdir = out / f"trial{k}"
        if trial.consistency not in stage1_dirs:
            s1dir = out / f"stage1_consistency_{str(trial.consistency).lower()}"
            train_stage1_run(trial, dataset, s1dir)
            stage1_dirs[trial.consistency] = s1dir
        train_stage2_run(trial, dataset, stage1_dirs[trial.consistency], tdir / "stage2")
        report = evaluate_run(trial, dataset, stage1_dirs[trial.consistency], tdir / "stage2", tdir / "eval")
        row = {"trial": k, "rgb": 1, "ray": int(trial.use_ray), "depth": 1, "normal": int(trial.use_normal),
               "consistency": int(trial.consistency), "separate_category": int(trial.per_category)}
        row.update({c: report.rows["all"][c] for c in ABLATION_COLUMNS[7:]})
        rows.append(row)
        write_csv(out / "ablation.csv", rows, ABLATION_COLUMNS)
    return rows


__all__ = ["CSV_COLUMNS", "DependencyError", "ValidationError", "ablate_run", "ablation_grid", "dataset_plan",
           "evaluate_run", "generate_dataset", "load_stage1", "load_stage2", "make_items", "train_stage1_run",
           "train_stage2_run"]
