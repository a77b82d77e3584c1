"""Command-line entry point wiring all modules.

Configuration precedence: command-line flags override values from the JSON
file given via --config, which override built-in defaults. Every command
writes <out>/run_summary.txt with the resolved config, a config hash, the
git describe string when available, seeds, and wall time. Failures exit
nonzero with a single "error: ..." line on stderr.
"""

from __future__ import annotations

import functools
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import camgeo, evalharness as eh, scenes
from . import model as lvm
from .scenes import Dataset


def _load_config_file(ctx, param, value):
    if value:
        try:
            ctx.default_map = json.loads(Path(value).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise click.ClickException(f"config file {value}: {e}")
    return value


def config_option(f):
    return click.option("--config", type=click.Path(exists=True), is_eager=True,
                        expose_value=False, callback=_load_config_file,
                        help="JSON file with flag defaults (flags override it).")(f)


def cli_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as e:
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            sys.exit(1)
    return wrapper


def _summary(out_dir, config: dict, t0: float, extras: dict = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    merged = dict(extras or {})
    merged["wall_time_s"] = round(time.time() - t0, 3)
    eh.write_run_summary(out_dir / "run_summary.txt", config, merged)


def _model_config(variant, res, patch, width, heads, enc_layers, dec_layers,
                  learner_layers, seed) -> lvm.ModelConfig:
    overrides = dict(resolution=res, patch=patch, width=width, heads=heads, seed=seed)
    if enc_layers is not None:
        overrides["enc_layers"] = enc_layers
    if dec_layers is not None:
        overrides["dec_layers"] = dec_layers
    if learner_layers is not None:
        overrides["learner_layers"] = learner_layers
    return lvm.ModelConfig.desk(variant, **overrides)


def _parse_floats(text: str) -> list:
    return [float(x) for x in text.replace(",", " ").split()]


def _pose_from_text(text: str) -> camgeo.Pose:
    vals = _parse_floats(text)
    if len(vals) != 7:
        raise click.ClickException(f"pose needs 7 numbers tx,ty,tz,qw,qx,qy,qz, got {len(vals)}")
    return camgeo.camvec_to_pose(np.array(vals))


@click.group(context_settings={"show_default": True})
@click.version_option(package_name="latentview")
def main():
    """Pose-free novel view synthesis: data, training, evaluation, serving."""


@main.command()
@config_option
@click.option("--scenes", "n_scenes", type=int, default=64, help="Scene count.")
@click.option("--views", type=int, default=8, help="Views per scene.")
@click.option("--res", type=int, default=32, help="Image resolution.")
@click.option("--seed", type=int, default=7)
@click.option("--test", "n_test", type=int, default=0, help="Held-out test scenes.")
@click.option("--fov", type=float, default=60.0, help="Field of view (degrees).")
@click.option("--out", required=True, type=click.Path())
@cli_errors
def gen(n_scenes, views, res, seed, n_test, fov, out):
    """Generate a synthetic multi-view dataset."""
    t0 = time.time()
    cfg = {"scenes": n_scenes, "views": views, "res": res, "seed": seed,
           "test": n_test, "fov": fov}
    manifest = scenes.gen_dataset(n_scenes, views, res, seed, out, n_test, fov,
                                  progress=lambda i, n: None)
    _summary(out, cfg, t0, {"train_scenes": len(manifest.train),
                            "test_scenes": len(manifest.test)})
    click.echo(f"wrote {n_scenes} scenes to {out}")


@main.command()
@config_option
@click.option("--variant", type=click.Choice(["up", "pt"]), default="up")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", type=int, default=20000)
@click.option("--lr", type=float, default=4e-4)
@click.option("--batch", type=int, default=8)
@click.option("--seed", type=int, default=1)
@click.option("--clip", type=float, default=1.0, help="Global grad-norm clip.")
@click.option("--res", type=int, default=32)
@click.option("--patch", type=int, default=4)
@click.option("--width", type=int, default=128)
@click.option("--heads", type=int, default=4)
@click.option("--enc-layers", type=int, default=None, help="Default: variant preset.")
@click.option("--dec-layers", type=int, default=None, help="Default: variant preset.")
@click.option("--learner-layers", type=int, default=None, help="Default: variant preset.")
@click.option("--subset-count", type=int, default=None, help="Train on a seeded subset.")
@click.option("--subset-seed", type=int, default=0)
@click.option("--noise-sigma2", type=float, default=0.0,
              help="Gaussian pose-annotation noise variance (pt only).")
@click.option("--log-every", type=int, default=100)
@cli_errors
def train(variant, data, out, steps, lr, batch, seed, clip, res, patch, width,
          heads, enc_layers, dec_layers, learner_layers, subset_count,
          subset_seed, noise_sigma2, log_every):
    """Train a model; writes model.ckpt and loss.csv."""
    t0 = time.time()
    cfg = dict(variant=variant, data=str(data), steps=steps, lr=lr, batch=batch,
               seed=seed, clip=clip, res=res, patch=patch, width=width,
               heads=heads, enc_layers=enc_layers, dec_layers=dec_layers,
               learner_layers=learner_layers, subset_count=subset_count,
               subset_seed=subset_seed, noise_sigma2=noise_sigma2)
    dataset = Dataset(data)
    manifest = dataset.manifest
    if subset_count is not None:
        manifest = scenes.subset(manifest, count=subset_count, seed=subset_seed)
    model_cfg = _model_config(variant, res, patch, width, heads, enc_layers,
                              dec_layers, learner_layers, seed)
    model = lvm.Model(model_cfg)
    sampler = eh.TrainSampler(dataset, manifest, noise_sigma2, noise_seed=seed + 1)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = lvm.run_training(
        model, sampler, dataset.intrinsics, steps=steps, lr=lr,
        batch_size=batch, seed=seed, clip=clip, log_every=log_every,
        log_path=out_dir / "loss.csv",
        callback=lambda s, l, dt: click.echo(f"step {s}: loss {l:.6f} ({dt:.0f}s)"))
    model.save(out_dir / "model.ckpt")
    _summary(out, cfg, t0, {"final_loss": log[-1][1],
                            "model_params": model.store.n_params()})
    click.echo(f"checkpoint: {out_dir / 'model.ckpt'}")


@main.command("eval")
@config_option
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--split", type=click.Choice(["test", "train"]), default="test")
@click.option("--modes", default="interp,extrap", help="Comma list of target modes.")
@click.option("--align-steps", type=int, default=0,
              help="Evaluation-time pose alignment steps (pt only).")
@click.option("--mapper", is_flag=True, help="Render via the fitted camera mapper.")
@click.option("--limit", type=int, default=None, help="Max scenes to evaluate.")
@click.option("--baseline", type=click.Choice(["copy", "oracle"]), default=None,
              help="Evaluate a baseline instead of the checkpoint.")
@cli_errors
def eval_cmd(ckpt, data, out, split, modes, align_steps, mapper, limit, baseline):
    """Evaluate a checkpoint (or baseline) over a dataset split."""
    t0 = time.time()
    cfg = dict(ckpt=str(ckpt), data=str(data), split=split, modes=modes,
               align_steps=align_steps, mapper=mapper, limit=limit,
               baseline=baseline)
    dataset = Dataset(data)
    predictor = baseline if baseline else lvm.Model.load(ckpt)
    report = eh.eval_run(predictor, dataset, split=split,
                         modes=tuple(modes.split(",")), limit=limit,
                         align_steps=align_steps, mapper=mapper)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save(out_dir / "metrics.csv")
    _summary(out, cfg, t0, report.aggregates)
    for k in sorted(report.aggregates):
        click.echo(f"{k}={report.aggregates[k]}")


@main.command("sweep-scale")
@config_option
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--counts", default="64,256,1024", help="Train-scene counts.")
@click.option("--variants", default="up,pt")
@click.option("--steps", type=int, default=2500)
@click.option("--lr", type=float, default=4e-4)
@click.option("--batch", type=int, default=4)
@click.option("--seed", type=int, default=1)
@click.option("--subset-seed", type=int, default=0)
@click.option("--width", type=int, default=96)
@click.option("--res", type=int, default=32)
@click.option("--cache", type=click.Path(), default=None,
              help="Checkpoint cache dir (reuses finished runs).")
@click.option("--limit", type=int, default=None)
@cli_errors
def sweep_scale(data, out, counts, variants, steps, lr, batch, seed,
                subset_seed, width, res, cache, limit):
    """Data-scaling sweep: one training run per (variant, scene count)."""
    t0 = time.time()
    counts_list = [int(x) for x in counts.split(",")]
    cfg = dict(data=str(data), counts=counts, variants=variants, steps=steps,
               lr=lr, batch=batch, seed=seed, subset_seed=subset_seed,
               width=width, res=res)
    dataset = Dataset(data)
    rep = eh.sweep_scaling(
        dataset, counts_list, variants=tuple(variants.split(",")),
        config_overrides=dict(width=width, resolution=res), steps=steps, lr=lr,
        batch_size=batch, seed=seed, subset_seed=subset_seed, cache_dir=cache,
        limit=limit,
        callback=lambda s, l, dt: click.echo(f"  step {s}: {l:.5f}") if s % 500 == 0 else None)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rep.save(out_dir / "sweep_scale.csv")
    _summary(out, cfg, t0, {"points": len(rep.points), "hash": rep.config_hash})
    for p in rep.points:
        click.echo(str(p))


@main.command("sweep-noise")
@config_option
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--sigma2", default="0.001,0.01,0.1", help="Noise variances.")
@click.option("--steps", type=int, default=2500)
@click.option("--lr", type=float, default=4e-4)
@click.option("--batch", type=int, default=4)
@click.option("--seed", type=int, default=1)
@click.option("--subset-count", type=int, default=None)
@click.option("--subset-seed", type=int, default=0)
@click.option("--width", type=int, default=96)
@click.option("--res", type=int, default=32)
@click.option("--cache", type=click.Path(), default=None)
@click.option("--limit", type=int, default=None)
@cli_errors
def sweep_noise(data, out, sigma2, steps, lr, batch, seed, subset_count,
                subset_seed, width, res, cache, limit):
    """Pose-noise ablation: posed-target models on noised poses vs the
    unposed model on the same images."""
    t0 = time.time()
    cfg = dict(data=str(data), sigma2=sigma2, steps=steps, lr=lr, batch=batch,
               seed=seed, subset_count=subset_count, width=width, res=res)
    dataset = Dataset(data)
    manifest = dataset.manifest
    if subset_count is not None:
        manifest = scenes.subset(manifest, count=subset_count, seed=subset_seed)
    rep = eh.sweep_noise(
        dataset, _parse_floats(sigma2), manifest=manifest,
        config_overrides=dict(width=width, resolution=res), steps=steps, lr=lr,
        batch_size=batch, seed=seed, cache_dir=cache, limit=limit)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rep.save(out_dir / "sweep_noise.csv")
    _summary(out, cfg, t0, {"points": len(rep.points), "hash": rep.config_hash})
    for p in rep.points:
        click.echo(str(p))


@main.command("map-fit")
@config_option
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--fraction", type=float, default=0.1, help="Posed train subset.")
@click.option("--steps", type=int, default=2000)
@click.option("--lr", type=float, default=1e-4)
@click.option("--batch", type=int, default=4)
@click.option("--seed", type=int, default=2)
@click.option("--subset-seed", type=int, default=0)
@click.option("--joint/--mapper-only", default=True,
              help="Also finetune the model, not just (A, b).")
@cli_errors
def map_fit(ckpt, data, out, fraction, steps, lr, batch, seed, subset_seed, joint):
    """Fit the linear camera mapper on a posed subset of the train scenes."""
    t0 = time.time()
    cfg = dict(ckpt=str(ckpt), data=str(data), fraction=fraction, steps=steps,
               lr=lr, batch=batch, seed=seed, joint=joint)
    dataset = Dataset(data)
    model = lvm.Model.load(ckpt)
    sub = scenes.subset(dataset.manifest, fraction=fraction, seed=subset_seed)
    samples = []
    for sid in sub.train:
        task = dataset.task(sid)
        poses = dataset.poses(sid)
        i, j = task.inputs
        views = [dataset.image(sid, i), dataset.image(sid, j)]
        for k in task.interp:
            rel = eh.relative_pose(poses[i], poses[k])
            samples.append({"views": views, "target": dataset.image(sid, k),
                            "target_camvec": camgeo.pose_to_camvec(rel)})
    log = lvm.mapper_fit(model, samples, dataset.intrinsics, lr=lr, steps=steps,
                         batch_size=batch, seed=seed, joint=joint,
                         callback=lambda s, l: click.echo(f"step {s}: {l:.6f}"))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir / "model.ckpt")
    _summary(out, cfg, t0, {"posed_scenes": len(sub.train),
                            "posed_samples": len(samples),
                            "final_loss": log[-1][1]})
    click.echo(f"checkpoint with mapper: {out_dir / 'model.ckpt'}")


@main.command()
@config_option
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--scene", "scene_id", required=True, help="Scene id for input views.")
@click.option("--pose", default=None,
              help="Explicit pose tx,ty,tz,qw,qx,qy,qz (relative to input view 1).")
@click.option("--view", type=int, default=None, help="Render a ground-truth view index.")
@click.option("--path", "path_file", type=click.Path(exists=True), default=None,
              help="File of 7-vector poses; renders frame_<k>.png per line.")
@click.option("--out", required=True, type=click.Path())
@cli_errors
def render(ckpt, data, scene_id, pose, view, path_file, out):
    """Render images from a checkpoint for explicit poses or view indices."""
    t0 = time.time()
    cfg = dict(ckpt=str(ckpt), data=str(data), scene=scene_id, pose=pose,
               view=view, path=path_file)
    if sum(x is not None for x in (pose, view, path_file)) != 1:
        raise click.ClickException("give exactly one of --pose, --view, --path")
    dataset = Dataset(data)
    model = lvm.Model.load(ckpt)
    intr = dataset.intrinsics
    task = dataset.task(scene_id)
    poses = dataset.poses(scene_id)
    i, j = task.inputs
    views = [dataset.image(scene_id, i), dataset.image(scene_id, j)]
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def render_pose(p: camgeo.Pose) -> np.ndarray:
        if model.config.variant == "pt":
            return model.forward_ptlvsm(views, p, intr).data.astype(np.float64)
        return lvm.render_controlled(model, views, p, intr)

    written = []
    if view is not None:
        if model.config.variant == "up" and not model.has_mapper:
            latent = model.encode_scene(views, intr)
            _, pm = model.latent_plucker_learn(dataset.image(scene_id, view), latent, intr)
            img = model.decode_view(latent, pm).data.astype(np.float64)
        else:
            img = render_pose(eh.relative_pose(poses[i], poses[view]))
        p = out_dir / f"view_{view}.png"
        scenes.save_png(p, img)
        written.append(p)
    elif pose is not None:
        img = render_pose(_pose_from_text(pose))
        p = out_dir / "render.png"
        scenes.save_png(p, img)
        written.append(p)
    else:
        lines = [l for l in Path(path_file).read_text().splitlines()
                 if l.strip() and not l.startswith("#")]
        for k, line in enumerate(lines):
            img = render_pose(_pose_from_text(line))
            p = out_dir / f"frame_{k:04d}.png"
            scenes.save_png(p, img)
            written.append(p)
    _summary(out, cfg, t0, {"frames": len(written)})
    for p in written:
        click.echo(str(p))


@main.command()
@config_option
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--scene", "scene_id", required=True)
@click.option("--out", required=True, type=click.Path())
@cli_errors
def attn(ckpt, data, scene_id, out):
    """Export cross-view attention grids and the correspondence score."""
    t0 = time.time()
    cfg = dict(ckpt=str(ckpt), data=str(data), scene=scene_id)
    dataset = Dataset(data)
    model = lvm.Model.load(ckpt)
    task = dataset.task(scene_id)
    poses = dataset.poses(scene_id)
    i, j = task.inputs
    views = [dataset.image(scene_id, i), dataset.image(scene_id, j)]
    blocks = eh.attn_extract(model, views, dataset.intrinsics)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    gt = scenes.gt_correspondence(dataset.geometry(scene_id), poses[i], poses[j],
                                  dataset.intrinsics, model.config.patch)
    scores = {}
    for b in blocks:
        eh.save_attention_grid(b, out_dir / f"attn_{b.query_view}to{b.key_view}.png")
    scores["attn_corr_score"] = eh.attn_corr_score(blocks[0], gt)
    scores["random_baseline"] = eh.random_baseline_score(model.config.grid)
    sim = eh.tokenizer_similarity_block(model, views)
    eh.save_attention_grid(sim, out_dir / "tokenizer_similarity.png")
    scores["tokenizer_similarity_score"] = eh.attn_corr_score(sim, gt)
    _summary(out, cfg, t0, scores)
    for k, v in scores.items():
        click.echo(f"{k}={v}")


@main.command()
@config_option
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--split", type=click.Choice(["test", "train"]), default="test")
@click.option("--limit", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@cli_errors
def latents(ckpt, data, split, limit, out):
    """Export (latent, ground-truth) camera-vector pairs plus a linear-fit
    diagnostic."""
    t0 = time.time()
    cfg = dict(ckpt=str(ckpt), data=str(data), split=split, limit=limit)
    dataset = Dataset(data)
    model = lvm.Model.load(ckpt)
    table = eh.export_latent_pairs(model, dataset, split=split, limit=limit)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.save(out_dir / "latent_pairs.csv")
    _summary(out, cfg, t0, table.diagnostic)
    for k, v in table.diagnostic.items():
        click.echo(f"{k}={v}")


@main.command()
@config_option
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--port", type=int, default=8080)
@click.option("--host", default="127.0.0.1")
@click.option("--data", type=click.Path(exists=True), default=None,
              help="Dataset for scene sessions and ground-truth comparison.")
@cli_errors
def serve(ckpt, port, host, data):
    """Serve the checkpoint over HTTP for interactive rendering."""
    from . import server as srv
    httpd, service = srv.serve(ckpt, port=port, data_root=data, host=host)
    click.echo(f"serving {ckpt} on http://{host}:{httpd.server_address[1]} "
               f"(variant={service.model.config.variant}, "
               f"mapper={'yes' if service.model.has_mapper else 'no'})")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        click.echo("shutting down")
    finally:
        httpd.server_close()


if __name__ == "__main__":
    main()
