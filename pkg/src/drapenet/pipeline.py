"""Dataset generation, training, checkpoints, evaluation and timing."""
from __future__ import annotations

import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

import numpy as np

from . import tensorfile
from .config import DatasetSection, LossSection, SimSection, TrainSection
from .losses import BodyContext, LossWeights, correspondences, total_loss
from .mesh import TriMesh
from .metrics import ANGLE_THRESHOLDS, DIST_THRESHOLDS, EvalReport, evaluate_pair, normal_errors, precision_curve
from .metrics import vertex_errors
from .model import DrapeNet, ModelConfig, SceneInputs, predict, prepare_inputs
from .optim import adam_step
from .sim import BodyProxy, GarmentTemplate, SimConfig, drape, generate_body, generate_garment_template
from .sim import random_local_rotations, rest_skeleton
from .skinning import PoseSkeleton, RigidTransform, dqs
from .tensor import backward

log = logging.getLogger(__name__)

SAMPLE_FORMAT = "drapenet-sample"
MANIFEST_FORMAT = "drapenet-manifest"
CHECKPOINT_FORMAT = "drapenet-checkpoint"
SPLITS = ("train", "val", "test")


class PipelineError(RuntimeError):
    pass


class TrainingDiverged(PipelineError):
    pass


def garment_skinning_pose(body_pose: PoseSkeleton, garment_rest: PoseSkeleton) -> PoseSkeleton:
    """Skinning transforms that carry a template rigged on ``garment_rest`` onto the posed body.

    Joint j maps the template's rest joint position onto the body's posed
    joint: body_pose_j composed with a translation by (body rest - garment rest).
    """
    if body_pose.n_joints != garment_rest.n_joints:
        raise PipelineError("body and garment skeletons differ in joint count")
    shift = body_pose.rest_positions() - garment_rest.rest_positions()
    pose = [p.compose(RigidTransform(translation=d)) for p, d in zip(body_pose.pose, shift)]
    return garment_rest.with_pose(pose)


def template_id(kind: str, resolution) -> str:
    return f"{kind}-{resolution[0]}x{resolution[1]}"


# ---------------------------------------------------------------- scenes and samples

@dataclass
class Scene:
    template: GarmentTemplate
    body: BodyProxy
    shape_params: np.ndarray
    pose_local: np.ndarray  # (J, 3) rotation vectors
    skin_pose: PoseSkeleton  # transforms actually used for skinning
    skinned: TriMesh
    condition: np.ndarray


def make_scene(ds: DatasetSection, seed: int, index: int, resolution=None, identity_pose: bool = False) -> Scene:
    """Scene ``index`` of the dataset defined by (ds, seed); independent of every other index."""
    rng = np.random.default_rng([seed, index])
    shape = np.array([rng.uniform(*ds.height_range), rng.uniform(*ds.torso_range), rng.uniform(*ds.limb_range)])
    size = (rng.uniform(*ds.size_range), rng.uniform(*ds.size_range)) if ds.vary_template else (1.0, 1.0)
    local = random_local_rotations(rng, ds.pose_scale)
    if identity_pose:
        shape = np.array([1.0, 1.0, 1.0])
        local = np.zeros_like(local)
    posed = rest_skeleton(shape[0]).posed_from_local(local)
    body = generate_body(shape, posed, ds.body_n_around, ds.body_spacing)
    nx, ny = resolution or ds.resolution
    template = generate_garment_template(ds.garment, nx, ny, size)
    skin_pose = garment_skinning_pose(posed, rest_skeleton(1.0))
    skinned = dqs(template.mesh, skin_pose, template.weights)
    cond = np.array(size) if ds.vary_template else np.zeros(0)
    return Scene(template, body, shape, local, skin_pose, skinned, cond)


@dataclass
class DrapeSample:
    template_id: str
    template: TriMesh
    pinned: np.ndarray
    body: TriMesh
    shape_params: np.ndarray
    pose_local: np.ndarray
    skin_transforms: np.ndarray  # (J, 7): rotation quaternion (w, x, y, z) then translation
    skinned: TriMesh
    gt: TriMesh
    condition: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.template.n_vertices
        if self.skinned.n_vertices != n or self.gt.n_vertices != n:
            raise PipelineError(f"sample {self.template_id}: skinned/gt vertex counts differ from template ({n})")

    @property
    def translations(self) -> np.ndarray:
        return self.gt.vertices - self.skinned.vertices

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "template_vertices": self.template.vertices, "faces": self.template.faces, "pinned": self.pinned,
            "body_vertices": self.body.vertices, "body_faces": self.body.faces,
            "shape_params": self.shape_params, "pose_local": self.pose_local,
            "skin_transforms": self.skin_transforms, "skinned": self.skinned.vertices,
            "gt": self.gt.vertices, "condition": self.condition,
        }


def save_sample(path: str | PathLike, sample: DrapeSample) -> None:
    meta = {"format": SAMPLE_FORMAT, "version": 1, "template_id": sample.template_id, **sample.meta}
    tensorfile.save(path, sample.tensors(), meta)


def load_sample(path: str | PathLike) -> DrapeSample:
    t, meta = tensorfile.load(path)
    if meta.get("format") != SAMPLE_FORMAT:
        raise tensorfile.FormatError(f"{path}: not a drape sample")
    template = TriMesh(t["template_vertices"], t["faces"])
    extra = {k: v for k, v in meta.items() if k not in ("format", "version", "template_id")}
    return DrapeSample(meta["template_id"], template, t["pinned"], TriMesh(t["body_vertices"], t["body_faces"]),
                       t["shape_params"], t["pose_local"], t["skin_transforms"], template.with_vertices(t["skinned"]),
                       template.with_vertices(t["gt"]), t["condition"], extra)


def _transforms_array(pose: PoseSkeleton) -> np.ndarray:
    return np.array([np.concatenate([p.rotation, p.translation]) for p in pose.pose])


def simulate_sample(ds: DatasetSection, sim: SimSection, seed: int, index: int):
    """Build and drape scene ``index``; returns (DrapeSample or None, drape info)."""
    scene = make_scene(ds, seed, index)
    res = drape(scene.skinned, scene.body, sim.build(), rest=scene.template.mesh, pinned=scene.template.pinned)
    info = {"index": index, "converged": res.converged, "steps": res.steps, "last_displacement": res.last_displacement}
    if not res.converged:
        return None, info
    margin = sim.collision_margin if sim.collision_margin is not None else scene.body.default_margin()
    sd = scene.body.signed_distance(res.mesh.vertices)
    sample = DrapeSample(
        template_id(ds.garment, ds.resolution), scene.template.mesh, scene.template.pinned, scene.body.mesh,
        scene.shape_params, scene.pose_local, _transforms_array(scene.skin_pose), scene.skinned, res.mesh,
        scene.condition, {"index": index, "steps": res.steps, "margin": margin, "min_signed_distance": float(sd.min())},
    )
    return sample, info


# ---------------------------------------------------------------- manifest

@dataclass
class DatasetManifest:
    root: Path
    seed: int
    template_id: str
    samples: list  # [{"file", "index", "split"}]
    dropped: list
    dataset: dict
    sim: dict

    def files(self, split: str | None = None) -> list[Path]:
        if split is not None and split not in SPLITS:
            raise PipelineError(f"unknown split {split!r}")
        return [self.root / s["file"] for s in self.samples if split is None or s["split"] == split]

    def to_dict(self) -> dict:
        return {"format": MANIFEST_FORMAT, "version": 1, "seed": self.seed, "template_id": self.template_id,
                "samples": self.samples, "dropped": self.dropped, "dataset": self.dataset, "sim": self.sim}

    def save(self) -> Path:
        path = self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | PathLike, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        if d.get("format") != MANIFEST_FORMAT:
            raise PipelineError(f"{path}: not a dataset manifest")
        m = cls(path.parent, d["seed"], d["template_id"], d["samples"], d["dropped"], d["dataset"], d["sim"])
        m.validate(check_files)
        return m

    def validate(self, check_files: bool = True) -> None:
        seen = set()
        for s in self.samples:
            if s["split"] not in SPLITS:
                raise PipelineError(f"sample {s['file']}: unknown split {s['split']!r}")
            if s["file"] in seen:
                raise PipelineError(f"sample {s['file']} listed twice")
            seen.add(s["file"])
            if check_files:
                f = self.root / s["file"]
                if not f.exists():
                    raise PipelineError(f"manifest references missing file {f}")
                load_sample(f)


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def _simulate_job(args):
    return simulate_sample(*args)


def generate_dataset(ds: DatasetSection, sim: SimSection, seed: int, out_dir: str | PathLike,
                     workers: int = 1) -> DatasetManifest:
    """Simulate ``ds.n_samples`` scenes into ``out_dir``; non-converged drapes are dropped and logged."""
    root = Path(out_dir)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    jobs = [(ds, sim, seed, i) for i in range(ds.n_samples)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_simulate_job, jobs))
    else:
        results = [_simulate_job(j) for j in jobs]
    kept, dropped = [], []
    for sample, info in results:
        if sample is None:
            log.warning("scene %d did not converge after %d steps (last displacement %.3g); dropped",
                        info["index"], info["steps"], info["last_displacement"])
            dropped.append(info)
            continue
        name = f"samples/{info['index']:05d}.drp"
        save_sample(root / name, sample)
        kept.append({"file": name, "index": info["index"]})
    order = np.random.default_rng(seed).permutation(len(kept))
    n_train, n_val, _ = split_counts(len(kept), ds.splits)
    for rank, k in enumerate(order):
        kept[k]["split"] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    manifest = DatasetManifest(root, seed, template_id(ds.garment, ds.resolution), kept, dropped,
                               ds.model_dump(mode="json"), sim.model_dump(mode="json"))
    manifest.save()
    return manifest


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | PathLike, net: DrapeNet, meta: dict | None = None) -> None:
    store = net.params
    tensors = {}
    for name in store.names():
        tensors[f"param/{name}"] = store[name].data
        tensors[f"adam_m/{name}"] = store.m[name]
        tensors[f"adam_v/{name}"] = store.v[name]
    full = {"format": CHECKPOINT_FORMAT, "version": 1, "model": net.cfg.to_dict(), "adam_step": store.step,
            **(meta or {})}
    tensorfile.save(path, tensors, full)


def load_checkpoint(path: str | PathLike) -> tuple[DrapeNet, dict]:
    tensors, meta = tensorfile.load(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise tensorfile.FormatError(f"{path}: not a checkpoint")
    net = DrapeNet(ModelConfig(**meta["model"]))
    store = net.params
    store.load_values({n: tensors[f"param/{n}"] for n in store.names()})
    for n in store.names():
        store.m[n] = tensors[f"adam_m/{n}"].copy()
        store.v[n] = tensors[f"adam_v/{n}"].copy()
    store.step = int(meta["adam_step"])
    return net, meta


# ---------------------------------------------------------------- training

@dataclass
class TrainItem:
    file: str
    inputs: SceneInputs
    gt: TriMesh
    skinned: TriMesh
    body: BodyContext
    pairs: np.ndarray


def load_items(files, cfg: ModelConfig, weights: LossWeights) -> list[TrainItem]:
    items = []
    for f in files:
        s = load_sample(f)
        inputs = prepare_inputs(s.skinned, s.body.vertices, cfg, s.condition if cfg.condition_dim else None)
        items.append(TrainItem(str(f), inputs, s.gt, s.skinned,
                               BodyContext.from_mesh(s.body, weights.normal_extension_frac), s.gt.two_ring))
    return items


def mean_e_dist(net: DrapeNet, items: list[TrainItem]) -> float:
    return float(np.mean([vertex_errors(it.skinned.with_vertices(net.predict_positions(it.inputs)), it.gt).mean()
                          for it in items]))


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    best_val_e_dist: float
    history: list  # per-epoch records
    steps: int


def _finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))


def train(manifest: DatasetManifest, model_cfg: ModelConfig, loss: LossSection | LossWeights,
          train_cfg: TrainSection, seed: int, out_dir: str | PathLike, net: DrapeNet | None = None) -> TrainResult:
    """Per-sample Adam training; keeps the checkpoint with the lowest validation e_dist.

    ``out_dir`` receives ``best.ckpt``, ``last.ckpt`` (end of the latest
    finished epoch) and ``train_log.jsonl``. A non-finite loss or gradient
    aborts with both checkpoints left as they were.
    """
    weights = loss.build() if isinstance(loss, LossSection) else loss
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_items = load_items(manifest.files("train"), model_cfg, weights)
    if not train_items:
        raise PipelineError("train split is empty")
    val_items = load_items(manifest.files("val"), model_cfg, weights) or train_items
    net = net or DrapeNet(model_cfg)
    store = net.params
    rng = np.random.default_rng(seed)
    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    base_meta = {"template_id": manifest.template_id, "n_vertices": train_items[0].gt.n_vertices, "seed": seed}
    best = np.inf
    history = []
    step = 0
    save_checkpoint(last_path, net, {**base_meta, "epoch": 0})
    with open(out / "train_log.jsonl", "w") as logf:
        def emit(rec):
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
            logf.flush()

        for epoch in range(1, train_cfg.epochs + 1):
            order = rng.permutation(len(train_items))
            store.zero_grad()
            pending = 0
            for pos, i in enumerate(order):
                it = train_items[i]
                try:
                    with np.errstate(all="ignore"):
                        pred = net(it.inputs) + it.inputs.skinned
                        if not _finite(np.square(pred.data)):
                            raise FloatingPointError("prediction overflowed")
                        # pairing follows the current prediction, recomputed every iteration
                        corr = correspondences(it.body, pred.data)
                        parts = total_loss(pred, it.gt, it.body, it.pairs, weights, corr)
                        if not _finite(parts.total.data):
                            raise FloatingPointError("non-finite loss")
                        backward(parts.total)
                except FloatingPointError as e:
                    emit({"type": "abort", "epoch": epoch, "step": step, "reason": str(e)})
                    raise TrainingDiverged(f"{e} at step {step}; last good checkpoint: {last_path}") from None
                pending += 1
                if pending == train_cfg.accumulate or pos == len(order) - 1:
                    grads = {k: g / pending for k, g in store.grads().items()}
                    if not all(_finite(g) for g in grads.values()):
                        emit({"type": "abort", "epoch": epoch, "step": step, "reason": "non-finite gradient"})
                        raise TrainingDiverged(f"non-finite gradient at step {step}; last good checkpoint: {last_path}")
                    adam_step(store, grads, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
                    store.zero_grad()
                    pending = 0
                step += 1
                emit({"type": "step", "epoch": epoch, "step": step, "sample": it.file, **parts.as_dict()})
            val = mean_e_dist(net, val_items)
            improved = val < best
            if improved:
                best = val
                save_checkpoint(best_path, net, {**base_meta, "epoch": epoch, "val_e_dist": val})
            save_checkpoint(last_path, net, {**base_meta, "epoch": epoch, "val_e_dist": val})
            rec = {"type": "epoch", "epoch": epoch, "step": step, "val_e_dist": val, "best_val_e_dist": best,
                   "improved": improved}
            history.append(rec)
            emit(rec)
            log.info("epoch %d: val e_dist %.5f (best %.5f)", epoch, val, best)
            if train_cfg.stop_below is not None and val < train_cfg.stop_below:
                emit({"type": "stop", "epoch": epoch, "step": step, "val_e_dist": val})
                break
    return TrainResult(best_path, last_path, float(best), history, step)


# ---------------------------------------------------------------- evaluation

@dataclass
class SampleEval:
    file: str
    model: EvalReport
    baseline: EvalReport


@dataclass
class Evaluation:
    samples: list[SampleEval]
    aggregate: dict
    curves: dict

    def to_dict(self) -> dict:
        return {"aggregate": self.aggregate, "curves": self.curves,
                "samples": [{"file": s.file, "model": s.model.to_dict(), "baseline": s.baseline.to_dict()}
                            for s in self.samples]}


def check_compatible(meta: dict, sample: DrapeSample, cfg: ModelConfig) -> None:
    tid = meta.get("template_id")
    if tid is not None and tid != sample.template_id:
        raise PipelineError(f"checkpoint trained on template {tid!r}, sample uses {sample.template_id!r}")
    nv = meta.get("n_vertices")
    if nv is not None and nv != sample.template.n_vertices:
        raise PipelineError(f"checkpoint expects {nv} garment vertices, sample has {sample.template.n_vertices}")
    if cfg.condition_dim and len(sample.condition) != cfg.condition_dim:
        raise PipelineError(f"model expects a condition of length {cfg.condition_dim}, "
                            f"sample has {len(sample.condition)}")


def predict_sample(net: DrapeNet, sample: DrapeSample) -> TriMesh:
    cond = sample.condition if net.cfg.condition_dim else None
    inputs = prepare_inputs(sample.skinned, sample.body.vertices, net.cfg, cond)
    return sample.skinned.with_vertices(net.predict_positions(inputs))


def _aggregate(reports: list[EvalReport]) -> dict:
    return {k: float(np.mean([getattr(r, k) for r in reports]))
            for k in ("e_dist", "e_norm", "normalized_l2_percent")}


def evaluate(manifest: DatasetManifest, split: str, net: DrapeNet, meta: dict | None = None,
             workers: int = 1) -> Evaluation:
    """Model and skinning-baseline metrics per sample, their means, and curves pooled over the split."""
    files = manifest.files(split)
    if not files:
        raise PipelineError(f"split {split!r} is empty")
    meta = meta or {}

    def one(f):
        s = load_sample(f)
        check_compatible(meta, s, net.cfg)
        pred = predict_sample(net, s)
        return (SampleEval(str(Path(f).relative_to(manifest.root)), evaluate_pair(pred, s.gt),
                           evaluate_pair(s.skinned, s.gt)),
                vertex_errors(pred, s.gt), normal_errors(pred, s.gt),
                vertex_errors(s.skinned, s.gt), normal_errors(s.skinned, s.gt))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(one, files))
    else:
        rows = [one(f) for f in files]
    samples = [r[0] for r in rows]
    curves = {}
    for who, (di, ai) in (("model", (1, 2)), ("baseline", (3, 4))):
        d = np.concatenate([r[di] for r in rows])
        a = np.concatenate([r[ai] for r in rows])
        curves[who] = {"distance": list(zip(DIST_THRESHOLDS, precision_curve(d, DIST_THRESHOLDS))),
                       "angle": list(zip(ANGLE_THRESHOLDS, precision_curve(a, ANGLE_THRESHOLDS)))}
    aggregate = {"model": _aggregate([s.model for s in samples]),
                 "baseline": _aggregate([s.baseline for s in samples]), "n_samples": len(samples)}
    return Evaluation(samples, aggregate, curves)


# ---------------------------------------------------------------- timing

def bench(net: DrapeNet, ds: DatasetSection, sim: SimSection, seed: int, repetitions: int = 5,
          resolution=(45, 45), index: int = 0) -> dict:
    """Median wall time of ``predict`` and of the simulator on one identical scene, after a warm-up run."""
    scene = make_scene(ds, seed, index, resolution=resolution)
    sim_cfg: SimConfig = sim.build()
    cond = scene.condition if net.cfg.condition_dim else None
    tmpl = scene.template

    def run_predict():
        return predict(tmpl.mesh, scene.body.mesh, scene.skin_pose, tmpl.weights, net, cond)

    def run_drape():
        return drape(dqs(tmpl.mesh, scene.skin_pose, tmpl.weights), scene.body, sim_cfg, rest=tmpl.mesh,
                     pinned=tmpl.pinned)

    run_predict()
    warm = run_drape()
    t_pred, t_sim = [], []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        run_predict()
        t_pred.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        run_drape()
        t_sim.append(time.perf_counter() - t0)
    mp, ms = statistics.median(t_pred), statistics.median(t_sim)
    return {"n_vertices": tmpl.mesh.n_vertices, "repetitions": repetitions, "variant": net.cfg.variant,
            "predict_seconds": t_pred, "drape_seconds": t_sim, "median_predict_seconds": mp,
            "median_drape_seconds": ms, "speedup": ms / mp, "drape_steps": warm.steps,
            "drape_converged": warm.converged}
