"""Command-line entry point: gen-data, train, eval, infer, bench, grad-check."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
from pydantic import ValidationError
from threadpoolctl import threadpool_limits

from . import pipeline as P
from .config import RunConfig, echo_config, load_config
from .mesh import MeshError, obj_write
from .metrics import write_curve_csv
from .model import DrapeNet, predict
from .sim import SimError
from .tensorfile import FormatError

log = logging.getLogger("drapenet")

# errors that mean "bad input", reported without a traceback
USER_ERRORS = (P.PipelineError, FormatError, MeshError, SimError, FileNotFoundError, ValueError, KeyError)


def _setup(config, seed, threads, out, extra=None, variant=None) -> tuple[RunConfig, Path]:
    overrides = {"seed": seed, "threads": threads, "model.variant": variant, **(extra or {})}
    try:
        cfg = load_config(config, overrides)
    except ValidationError as e:
        raise click.UsageError(f"invalid configuration:\n{e}") from None
    except (OSError, ValueError) as e:
        raise click.UsageError(f"cannot read configuration: {e}") from None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    return cfg, out


def _common(fn):
    fn = click.option("--threads", type=int, default=None, help="Worker/BLAS thread cap (default 1).")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Master seed (overrides the config).")(fn)
    fn = click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
                      help="YAML or JSON run config; flags override it.")(fn)
    return fn


def _variant(fn):
    return click.option("--variant", type=click.Choice(["late", "global", "local"]), default=None,
                        help="Network variant (overrides the config).")(fn)


def _run(body, threads):
    with threadpool_limits(limits=threads):
        try:
            return body()
        except USER_ERRORS as e:
            raise click.ClickException(str(e)) from None


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _load_model(checkpoint, cfg: RunConfig, condition_dim=None) -> tuple[DrapeNet, dict]:
    if checkpoint:
        return P.load_checkpoint(checkpoint)
    return DrapeNet(cfg.model.build(cfg.seed, condition_dim)), {}


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Garment draping: synthetic data, training, evaluation and timing."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@_common
@click.option("--n-samples", type=int, default=None, help="Number of scenes to simulate.")
def gen_data(config, seed, out, threads, n_samples):
    """Simulate a dataset of drapes into OUT (manifest.json + samples/)."""
    cfg, out = _setup(config, seed, threads, out, {"dataset.n_samples": n_samples})

    def body():
        m = P.generate_dataset(cfg.dataset, cfg.sim, cfg.seed, out, workers=cfg.threads)
        click.echo(f"{len(m.samples)} samples written to {out} ({len(m.dropped)} dropped)")

    _run(body, cfg.threads)


@main.command()
@_common
@_variant
@click.option("--data", type=click.Path(exists=True), required=True, help="Dataset directory or manifest.")
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
def train(config, seed, out, threads, variant, data, epochs, lr):
    """Train a model; writes best.ckpt, last.ckpt and train_log.jsonl to OUT."""
    cfg, out = _setup(config, seed, threads, out, {"train.epochs": epochs, "train.lr": lr}, variant)

    def body():
        m = P.DatasetManifest.load(data)
        cond = P.load_sample(m.files("train")[0]).condition.size if m.files("train") else 0
        model_cfg = cfg.model.build(cfg.seed, cond)
        try:
            res = P.train(m, model_cfg, cfg.loss, cfg.train, cfg.seed, out)
        except P.TrainingDiverged as e:
            raise click.ClickException(str(e)) from None
        click.echo(f"best validation e_dist {res.best_val_e_dist:.6f} -> {res.best_checkpoint}")

    _run(body, cfg.threads)


@main.command("eval")
@_common
@click.option("--data", type=click.Path(exists=True), required=True, help="Dataset directory or manifest.")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", type=click.Choice(P.SPLITS), default=None)
def eval_cmd(config, seed, out, threads, data, checkpoint, split):
    """Evaluate a checkpoint and the skinning baseline; writes report.json and curve CSVs."""
    cfg, out = _setup(config, seed, threads, out, {"eval.split": split})

    def body():
        m = P.DatasetManifest.load(data)
        net, meta = P.load_checkpoint(checkpoint)
        ev = P.evaluate(m, cfg.eval.split, net, meta, workers=cfg.threads)
        _write_json(out / "report.json", {"split": cfg.eval.split, "checkpoint": str(checkpoint), **ev.to_dict()})
        for who, curves in ev.curves.items():
            write_curve_csv(out / f"{who}_distance_curve.csv", curves["distance"], ("threshold_m", "fraction"))
            write_curve_csv(out / f"{who}_angle_curve.csv", curves["angle"], ("threshold_deg", "fraction"))
        a = ev.aggregate
        click.echo(f"model    e_dist {a['model']['e_dist']:.6f} m  e_norm {a['model']['e_norm']:.3f} deg")
        click.echo(f"baseline e_dist {a['baseline']['e_dist']:.6f} m  e_norm {a['baseline']['e_norm']:.3f} deg")

    _run(body, cfg.threads)


@main.command()
@_common
@_variant
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Trained model; without one a freshly initialized model is used.")
@click.option("--sample", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Drape sample to run on; otherwise a scene is built from the dataset config.")
@click.option("--index", type=int, default=0, help="Scene index when no sample is given.")
@click.option("--identity-pose", is_flag=True, help="Use the default body in its rest pose.")
def infer(config, seed, out, threads, variant, checkpoint, sample, index, identity_pose):
    """Predict a drape; writes pred.obj and skinned.obj (and gt.obj for samples)."""
    cfg, out = _setup(config, seed, threads, out, variant=variant)

    def body():
        if sample:
            s = P.load_sample(sample)
            net, meta = _load_model(checkpoint, cfg, s.condition.size)
            P.check_compatible(meta, s, net.cfg)
            pred, skinned = P.predict_sample(net, s), s.skinned
            obj_write(s.gt, out / "gt.obj")
        else:
            scene = P.make_scene(cfg.dataset, cfg.seed, index, identity_pose=identity_pose)
            net, _ = _load_model(checkpoint, cfg, scene.condition.size)
            cond = scene.condition if net.cfg.condition_dim else None
            t = scene.template
            pred = predict(t.mesh, scene.body.mesh, scene.skin_pose, t.weights, net, cond)
            skinned = P.dqs(t.mesh, scene.skin_pose, t.weights)
            obj_write(scene.body.mesh, out / "body.obj")
        obj_write(pred, out / "pred.obj")
        obj_write(skinned, out / "skinned.obj")
        shift = float(np.abs(pred.vertices - skinned.vertices).max())
        click.echo(f"wrote {out / 'pred.obj'} ({pred.n_vertices} vertices, max offset from skinned {shift:.6f} m)")

    _run(body, cfg.threads)


@main.command("bench")
@_common
@_variant
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", type=click.Path(exists=True), default=None,
              help="Dataset whose generation settings define the benchmark scene.")
@click.option("--repetitions", type=int, default=None)
def bench_cmd(config, seed, out, threads, variant, checkpoint, data, repetitions):
    """Median wall time of predict vs. the cloth simulator on the same scene; writes bench.json."""
    cfg, out = _setup(config, seed, threads, out, {"bench.repetitions": repetitions}, variant)

    def body():
        ds, sim = cfg.dataset, cfg.sim
        if data:
            m = P.DatasetManifest.load(data, check_files=False)
            ds, sim = type(ds).model_validate(m.dataset), type(sim).model_validate(m.sim)
        ds = ds.model_copy(update={"garment": cfg.bench.garment})
        net, _ = _load_model(checkpoint, cfg, 2 if ds.vary_template else 0)
        rep = P.bench(net, ds, sim, cfg.seed, cfg.bench.repetitions, cfg.bench.resolution)
        rep["threads"] = cfg.threads
        _write_json(out / "bench.json", rep)
        click.echo(f"{rep['n_vertices']} vertices: predict {rep['median_predict_seconds']:.4f} s, "
                   f"drape {rep['median_drape_seconds']:.4f} s, speedup {rep['speedup']:.1f}x")

    _run(body, cfg.threads)


@main.command("grad-check")
@click.option("--instances", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tol", type=float, default=1e-4, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Also write grad_check.json here.")
def grad_check_cmd(instances, seed, tol, out):
    """Finite-difference check of every registered op and loss term; exit 1 if any row fails."""
    from .gradsuite import format_table, run_suite

    rows = run_suite(instances, seed)
    click.echo(format_table(rows, tol))
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(out) / "grad_check.json",
                    [{"name": r.name, "instances": r.instances, "max_rel_error": r.max_rel_error,
                      "passed": r.passed(tol)} for r in rows])
    failed = [r.name for r in rows if not r.passed(tol)]
    if failed:
        click.echo(f"FAILED: {', '.join(failed)}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
