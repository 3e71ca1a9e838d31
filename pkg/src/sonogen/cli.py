"""Command-line entry points for every pipeline stage."""

from __future__ import annotations

import json
import logging
from collections import Counter
from pathlib import Path

import click
import numpy as np

from . import augment as ag
from . import dataset as ds
from . import diffusion as df
from . import extraction as ex
from . import harness as hn
from . import segmentor as seg

log = logging.getLogger(__name__)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="debug logging")
def main(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


# -- dataset ---------------------------------------------------------------------


@main.group()
def dataset():
    """Ingestion, splitting, phantom generation."""


@dataset.command("ingest")
@click.option("--dir", "dir_path", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["filled_mask", "ellipse_contour"]),
              default="filled_mask")
@click.option("--trimester", type=click.Choice([t.value for t in ds.Trimester]),
              default="second")
@click.option("--out", required=True, type=click.Path())
def dataset_ingest(dir_path, mode, trimester, out):
    manifest, warnings = ds.ingest_hc18_style(dir_path, mode,
                                              trimester=ds.Trimester(trimester))
    manifest.save(out)
    click.echo(f"ingested {len(manifest.entries)} pairs "
               f"({len(warnings)} skipped) -> {out}")


@dataset.command("split")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--train-frac", default=0.7, show_default=True)
@click.option("--val-count", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def dataset_split(manifest_path, train_frac, val_count, seed, out):
    manifest = ds.DatasetManifest.load(manifest_path)
    split = ds.split_dataset(manifest, train_frac=train_frac, val_count=val_count,
                             seed=seed)
    split.save(out)
    labels = Counter(split.split.values())
    click.echo(f"split: {dict(labels)} -> {out}")


@dataset.command("phantoms")
@click.option("--count", required=True, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--size", default=128, show_default=True)
@click.option("--out", required=True, type=click.Path())
def dataset_phantoms(count, seed, size, out):
    manifest = ds.make_phantom_dataset(count, seed=seed, out_dir=out,
                                       height=size, width=size)
    click.echo(f"wrote {len(manifest.entries)} phantoms under {out}")


# -- augment ---------------------------------------------------------------------


@main.group()
def augment():
    """Classical augmentation baselines."""


@augment.command("preview")
@click.option("--policy", type=click.Choice(["weak", "strong"]), required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--count", default=4, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def augment_preview(policy, seed, manifest_path, count, config_path, out):
    config = json.loads(Path(config_path).read_text()) if config_path else {}
    pol = ag.policy_from_config(config, policy)
    manifest = ds.DatasetManifest.load(manifest_path)
    out = Path(out)
    for entry in manifest.entries[:count]:
        pair = ds.load_pair(entry)
        augmented = ag.apply_policy(pair, pol, seed)
        ds.save_gray_png(out / f"{pair.id}_orig.png", pair.image.pixels)
        ds.save_gray_png(out / f"{pair.id}_{policy}.png", augmented.image.pixels)
        ds.save_gray_png(out / f"{pair.id}_{policy}_mask.png",
                         augmented.mask.pixels * np.uint8(255))
    click.echo(f"previews for {min(count, len(manifest.entries))} pairs -> {out}")


# -- diffusion ---------------------------------------------------------------------


@main.group()
def diffusion():
    """Denoiser training and sampling."""


def _load_tri_dataset(manifest_path):
    manifest = ds.DatasetManifest.load(manifest_path)
    pairs = [ds.load_pair(e) for e in manifest.entries]
    return df.pairs_to_tris(pairs)


@diffusion.command("train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", default=200, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--lr", default=2e-4, show_default=True)
@click.option("--base-channels", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--max-steps", default=None, type=int)
@click.option("--ema-decay", default=0.999, show_default=True, type=float,
              help="shadow-weight decay; 0 disables and saves the raw weights")
def diffusion_train(manifest_path, out, epochs, batch_size, lr, base_channels, seed,
                    max_steps, ema_decay):
    data = _load_tri_dataset(manifest_path)
    size = data[0][0].height
    cfg = df.DiffusionTrainConfig(mode="from_scratch", epochs=epochs,
                                  batch_size=batch_size, learning_rate=lr, seed=seed,
                                  max_steps=max_steps,
                                  ema_decay=ema_decay or None)
    model = df.DenoiserNet(df.DenoiserConfig(image_size=size,
                                             base_channels=base_channels))
    schedule = df.NoiseSchedule.linear()
    result = df.train_denoiser(data, cfg, schedule=schedule, model=model)
    df.save_checkpoint(out, result.ema_model or result.model, schedule, cfg)
    click.echo(f"trained {len(result.losses)} steps, final loss "
               f"{np.mean(result.losses[-20:]):.4f} -> {out}")


@diffusion.command("finetune-lora")
@click.option("--base", "base_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--rank", default=8, show_default=True)
@click.option("--epochs", default=1, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--seed", default=0, show_default=True)
def diffusion_finetune_lora(base_path, manifest_path, out, rank, epochs, batch_size,
                            lr, seed):
    """Per-trimester adapter fine-tuning over a frozen base checkpoint."""
    model, schedule, base_cfg, _ = df.load_checkpoint(base_path)
    data = _load_tri_dataset(manifest_path)
    per_trimester = {t: [d for d in data if d[1] == t] for t in ds.Trimester}
    cfg = df.DiffusionTrainConfig(mode="lora_finetune", epochs=epochs,
                                  batch_size=batch_size, learning_rate=lr,
                                  lora_rank=rank, lora_seed=seed, seed=seed)
    adapters = df.train_per_trimester(per_trimester, model, cfg, schedule=schedule)
    df.save_checkpoint(out, model, schedule, base_cfg, adapters=adapters)
    click.echo(f"3 adapters over frozen base -> {out}")


@diffusion.command("sample")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--trimester", type=click.Choice([t.value for t in ds.Trimester]),
              required=True)
@click.option("--count", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--steps", default=20, show_default=True)
@click.option("--alpha", default=0.9, show_default=True,
              help="adapter merge scale when the checkpoint has adapters")
@click.option("--out", required=True, type=click.Path())
def diffusion_sample(checkpoint, trimester, count, seed, steps, alpha, out):
    model, schedule, _, adapters = df.load_checkpoint(checkpoint)
    label = ds.Trimester(trimester)
    if adapters:
        model = df.apply_adapter(model, adapters[label], alpha=alpha)
    cfg = df.SamplerConfig(steps=steps, seed=seed, alpha_merge=alpha)
    tris = df.sample_batch(model, label, count, cfg, schedule=schedule)
    out = Path(out)
    for i, tri in enumerate(tris):
        ds.save_tri_png(out / f"sample-{label.value}-{seed:05d}-{i:04d}.png", tri)
    click.echo(f"{count} samples ({label.value}) -> {out}")


# -- extraction ---------------------------------------------------------------------


@main.group()
def extract():
    """Ellipse extraction over sampled tri-channel images."""


@extract.command("run")
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--thr", default=127, show_default=True)
@click.option("--q-hi", default=0.90, show_default=True)
@click.option("--q-lo", default=0.50, show_default=True)
@click.option("--out", required=True, type=click.Path())
def extract_run(in_dir, thr, q_hi, q_lo, out):
    """Process every tri-channel PNG in a directory; write per-image sidecars
    and a summary manifest."""
    in_dir = Path(in_dir)
    out = Path(out)
    out_dir = out.parent if out.suffix else out
    items = []
    for tri_path in sorted(in_dir.glob("*.png")):
        tri = ds.load_tri_png(tri_path)
        result = ex.extract(tri, thr=thr, q_hi=q_hi, q_lo=q_lo)
        gray, raw = ds.decompose_tri_channel(tri)
        stem = tri_path.stem
        gray_path = out_dir / "gray" / f"{stem}.png"
        raw_path = out_dir / "raw" / f"{stem}.png"
        ds.save_gray_png(gray_path, gray.pixels)
        ds.save_gray_png(raw_path, raw)
        trimester = _trimester_from_name(stem)
        sidecar = {
            "id": stem,
            "tri_path": str(tri_path),
            "gray_path": str(gray_path),
            "raw_path": str(raw_path),
            "trimester": trimester.value,
            "ellipse": result.ellipse.to_dict() if result.ellipse else None,
            "quality": result.quality,
            "status": result.status.value,
        }
        ds.atomic_write_json(out_dir / "sidecar" / f"{stem}.json", sidecar)
        items.append(sidecar)
    summary = {"version": 1, "threshold": thr, "q_hi": q_hi, "q_lo": q_lo,
               "items": items}
    ds.atomic_write_json(out if out.suffix else out / "extraction.json", summary)
    counts = Counter(i["status"] for i in items)
    click.echo(f"extracted {len(items)} images: {dict(counts)}")


def _trimester_from_name(stem: str) -> ds.Trimester:
    for t in ds.Trimester:
        if f"-{t.value}-" in stem or stem.endswith(f"-{t.value}"):
            return t
    return ds.Trimester.second


# -- segmentor ---------------------------------------------------------------------


@main.group()
def segmentor():
    """Promptable segmentor fine-tuning and evaluation."""


@segmentor.command("finetune")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def segmentor_finetune(config_path):
    """Config JSON keys: train_manifest, val_manifest (or shared manifest with
    split labels), out, epochs, batch_size, learning_rate, seed, model_seed."""
    cfg = json.loads(Path(config_path).read_text())
    manifest = ds.DatasetManifest.load(cfg["train_manifest"])
    missing = manifest.missing_files()
    if missing:
        raise click.ClickException(
            f"{len(missing)} referenced files missing, e.g. {missing[0]}")
    by_id = {e.id: e for e in manifest.entries}
    train_ids = manifest.ids_for("train") or [e.id for e in manifest.entries]
    val_manifest = (ds.DatasetManifest.load(cfg["val_manifest"])
                    if "val_manifest" in cfg else manifest)
    val_ids = val_manifest.ids_for("val")
    if not val_ids:
        raise click.ClickException("no val split available")
    train = [ds.load_pair(by_id[i]) for i in train_ids]
    val = [ds.load_pair(e) for e in val_manifest.entries if e.id in set(val_ids)]
    model = seg.SegModel(seed=cfg.get("model_seed", 0))
    tc = seg.TrainConfig(epochs=cfg.get("epochs", 20),
                         batch_size=cfg.get("batch_size", 5),
                         learning_rate=cfg.get("learning_rate", 1e-5),
                         weight_decay=cfg.get("weight_decay", 0.0),
                         seed=cfg.get("seed", 0))
    result = seg.fine_tune(model, train, val, tc)
    seg.save_model(cfg["out"], model, extra={"best_epoch": result.best_epoch,
                                             "history": result.history})
    click.echo(f"best epoch {result.best_epoch} "
               f"(val DSC {max(result.history):.4f}) -> {cfg['out']}")


@segmentor.command("eval")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True)
@click.option("--out", required=True, type=click.Path())
def segmentor_eval(manifest_path, checkpoint, split, out):
    manifest = ds.DatasetManifest.load(manifest_path)
    ids = manifest.ids_for(split) or [e.id for e in manifest.entries]
    pairs = [ds.load_pair(e) for e in manifest.entries if e.id in set(ids)]
    model = seg.load_model(checkpoint)
    rows = []
    for p in pairs:
        box = seg.perturb_box(p.mask, seed=seg.stable_box_seed(p.id))
        _, pred = seg.predict(model, p.image, box)
        rows.append((p.id, seg.dsc(pred, p.mask)))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        f.write("id,dsc\n")
        for rid, val in rows:
            f.write(f"{rid},{val:.6f}\n")
    mean = float(np.mean([v for _, v in rows]))
    click.echo(f"mean DSC over {len(rows)} {split} pairs: {mean:.4f} -> {out}")


# -- experiment ---------------------------------------------------------------------


@main.group()
def experiment():
    """Hybrid-dataset sweeps and reports."""


@experiment.command("run")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True))
@click.option("--out", "run_dir", required=True, type=click.Path())
def experiment_run(grid_path, run_dir):
    """Grid JSON keys: methods, n_real_values, seeds, total_budget, epochs,
    batch_size, learning_rate, real_manifest, synth_manifest."""
    spec = json.loads(Path(grid_path).read_text())
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "grid.json").write_text(json.dumps(spec, indent=1))  # frozen copy

    real = ds.DatasetManifest.load(spec["real_manifest"])
    missing = real.missing_files()
    if missing:
        raise click.ClickException(
            f"{len(missing)} referenced files missing, e.g. {missing[0]}")
    by_id = {e.id: e for e in real.entries}
    data = hn.SweepData(
        real_train=[ds.load_pair(by_id[i]) for i in real.ids_for("train")],
        val=[ds.load_pair(by_id[i]) for i in real.ids_for("val")],
        test=[ds.load_pair(by_id[i]) for i in real.ids_for("test")],
        synth_pool=([ds.load_pair(e) for e in
                     ds.DatasetManifest.load(spec["synth_manifest"]).entries]
                    if spec.get("synth_manifest") else []),
    )
    grid = hn.SweepGrid(
        methods=tuple(spec.get("methods", ("baseline", "SYN"))),
        n_real_values=tuple(spec.get("n_real_values", (5,))),
        seeds=tuple(spec.get("seeds", (0, 1, 2, 3, 4))),
        total_budget=spec.get("total_budget", 500),
        epochs=spec.get("epochs", 20),
        batch_size=spec.get("batch_size", 5),
        learning_rate=spec.get("learning_rate", 1e-5),
    )
    rows = hn.run_sweep(grid, data, run_dir)
    ds.atomic_write_json(run_dir / "rows.json", {"rows": [
        {"da_method": r.da_method, "n_real": r.n_real, "mean_dsc": r.mean_dsc,
         "std_dsc": r.std_dsc, "per_seed": r.per_seed, "wall_time": r.wall_time}
        for r in rows]})
    for r in rows:
        click.echo(f"{r.da_method} n_real={r.n_real}: "
                   f"{r.mean_dsc:.4f} ± {r.std_dsc:.4f}")


@experiment.command("report")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def experiment_report(run_dir, out):
    payload = json.loads((Path(run_dir) / "rows.json").read_text())
    rows = [hn.ResultRow(da_method=r["da_method"], n_real=r["n_real"],
                         mean_dsc=r["mean_dsc"], std_dsc=r["std_dsc"],
                         per_seed={int(k): v for k, v in r["per_seed"].items()},
                         wall_time=r["wall_time"])
            for r in payload["rows"]]
    paths = hn.emit_reports(rows, out)
    click.echo(f"reports -> {', '.join(str(p) for p in paths.values())}")


# -- review ---------------------------------------------------------------------


@main.group()
def review():
    """Human curation service."""


@review.command("serve")
@click.option("--port", default=8701, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--store", "store_path", required=True, type=click.Path())
@click.option("--ui", "ui_dir", type=click.Path(exists=True),
              help="directory with the built review UI (frontend/ after npm run build)")
def review_serve(port, host, store_path, ui_dir):
    from . import curation as cu

    if ui_dir is None and Path("frontend/dist").exists():
        ui_dir = "frontend"
    cu.serve(store_path, port=port, host=host, ui_dir=ui_dir)


@review.command("enqueue")
@click.option("--extraction", "extraction_path", required=True,
              type=click.Path(exists=True), help="summary JSON from `extract run`")
@click.option("--store", "store_path", required=True, type=click.Path())
@click.option("--audit", is_flag=True, help="queue auto-accepted items for review too")
def review_enqueue(extraction_path, store_path, audit):
    from . import curation as cu
    from .ellipse import EllipseParams

    summary = json.loads(Path(extraction_path).read_text())
    store = cu.CurationStore(store_path)
    inputs = []
    for item in summary["items"]:
        if item["status"] == ex.ExtractionStatus.rejected_auto.value:
            continue
        raw = ds.load_gray_png(item["raw_path"])
        binary = ex.threshold_channel(raw, thr=summary.get("threshold", 127))
        result = ex.ExtractionResult(
            raw_channel=raw, binary=binary,
            ellipse=EllipseParams.from_dict(item["ellipse"]) if item["ellipse"] else None,
            filled=None, quality=item["quality"],
            status=ex.ExtractionStatus(item["status"]))
        inputs.append(cu.ReviewInput(
            id=item["id"], image=ds.GrayImage(pixels=ds.load_gray_png(item["gray_path"])),
            trimester=ds.Trimester(item.get("trimester", "second")), result=result))
    stats = store.enqueue(inputs, audit_accepted=audit)
    click.echo(f"enqueued {stats['added']} items ({stats['duplicates']} duplicates) "
               f"-> {store_path}")


if __name__ == "__main__":
    main()
