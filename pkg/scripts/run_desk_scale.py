#!/usr/bin/env python3
"""Full desk-scale pipeline, end to end, into one run directory.

Stages: phantom corpus -> from-scratch diffusion training -> per-trimester
adapter fine-tuning -> batch sampling -> ellipse extraction -> auto-curation
-> hybrid-vs-baseline segmentor sweep -> reports.

Roughly 45 min on one CPU core at the default desk-scale settings; pass
--quick for a minutes-long smoke run.
"""

import argparse
import json
import logging
import time
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from sonogen import curation as cu
from sonogen import dataset as ds
from sonogen import diffusion as df
from sonogen import extraction as ex
from sonogen import harness as hn

log = logging.getLogger("desk_scale")


def build_corpus(out_dir: Path, per_trimester: int, size: int, seed: int):
    rng = np.random.default_rng(seed)
    pairs = []
    for trimester in ds.Trimester:
        for i in range(per_trimester):
            spec = ds.random_phantom_spec(rng, trimester, height=size, width=size)
            pair = ds.generate_phantom(spec)
            pairs.append(replace(pair, id=f"few-{trimester.value}-{i:03d}"))
    entries = [ds.save_pair(p, out_dir / "images", out_dir / "masks") for p in pairs]
    ds.DatasetManifest(entries=entries, seed=seed).save(out_dir / "manifest.json")
    return pairs


def train_diffusion(pairs, steps: int, size: int, run_dir: Path, seed: int):
    data = df.pairs_to_tris(pairs)
    schedule = df.NoiseSchedule.linear()
    torch.manual_seed(seed)
    model = df.DenoiserNet(df.DenoiserConfig(image_size=size))
    cfg = df.DiffusionTrainConfig(mode="from_scratch", epochs=10**9, batch_size=4,
                                  learning_rate=2e-4, seed=seed, max_steps=steps,
                                  ema_decay=0.999)
    result = df.train_denoiser(data, cfg, schedule=schedule, model=model)
    log.info("base training: %d steps, last-20 loss %.4f", len(result.losses),
             float(np.mean(result.losses[-20:])))
    base = result.ema_model  # shadow weights sample cleaner than the raw ones
    df.save_checkpoint(run_dir / "diffusion_base.pt", base, schedule, cfg)
    return base, schedule, data


def finetune_adapters(model, schedule, data, steps: int, seed: int):
    per_trimester = {t: [d for d in data if d[1] == t] for t in ds.Trimester}
    cfg = df.DiffusionTrainConfig(mode="lora_finetune", epochs=10**9, batch_size=4,
                                  learning_rate=1e-4, lora_rank=8, lora_seed=seed,
                                  seed=seed, max_steps=steps)
    adapters = df.train_per_trimester(per_trimester, model, cfg, schedule=schedule)
    base_sums = {a.base_checksum for a in adapters.values()}
    assert base_sums == {df.module_checksum(model, only_base=True)}, \
        "base weights drifted during adapter fine-tuning"
    return adapters


def generate_and_curate(model, schedule, adapters, count: int, run_dir: Path,
                        seed: int, alpha: float, batch: int = 50):
    labels = ds.sample_trimester_mix(count, seed=seed)
    per_label = Counter(labels)
    store = cu.CurationStore(run_dir / "review_store")
    statuses = Counter()
    sample_idx = 0
    for trimester, n in per_label.items():
        adapted = df.apply_adapter(model, adapters[trimester], alpha=alpha)
        for start in range(0, n, batch):
            chunk = min(batch, n - start)
            tris = df.sample_batch(adapted, trimester, chunk,
                                   df.SamplerConfig(steps=20, seed=seed + sample_idx),
                                   schedule=schedule)
            for tri in tris:
                result = ex.extract(tri)
                statuses[result.status.value] += 1
                if result.status != ex.ExtractionStatus.rejected_auto:
                    gray, _ = ds.decompose_tri_channel(tri)
                    store.enqueue([cu.ReviewInput(
                        id=f"syn-{trimester.value}-{sample_idx:05d}", image=gray,
                        trimester=trimester, result=result)])
                sample_idx += 1
    log.info("extraction gate: %s (pass rate %.2f)", dict(statuses),
             statuses["accepted_auto"] / max(sample_idx, 1))
    manifest = store.export_curated(run_dir / "curated")
    return manifest, statuses


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk_scale", type=Path)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--per-trimester", type=int, default=20)
    parser.add_argument("--diffusion-steps", type=int, default=12000)
    parser.add_argument("--adapter-steps", type=int, default=150)
    parser.add_argument("--samples", type=int, default=600)
    parser.add_argument("--n-real", type=int, default=5)
    parser.add_argument("--budget", type=int, default=500)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--lr", type=float, default=1e-3,
                        help="segmentor decoder learning rate (desk scale)")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--quick", action="store_true",
                        help="tiny settings for a smoke run")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.quick:
        args.diffusion_steps = 300
        args.adapter_steps = 20
        args.samples = 24
        args.budget = 20
        args.seeds = [0]

    run_dir = args.out
    run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    log.info("stage 1: %d phantoms per trimester", args.per_trimester)
    few_shot = build_corpus(run_dir / "few_shot", args.per_trimester, args.size,
                            args.seed)

    log.info("stage 2: diffusion training (%d steps)", args.diffusion_steps)
    model, schedule, data = train_diffusion(few_shot, args.diffusion_steps, args.size,
                                            run_dir, args.seed)

    log.info("stage 3: per-trimester adapters (%d steps each)", args.adapter_steps)
    adapters = finetune_adapters(model, schedule, data, args.adapter_steps, args.seed)
    df.save_checkpoint(run_dir / "diffusion_adapted.pt", model, schedule,
                       df.DiffusionTrainConfig(), adapters=adapters)

    log.info("stage 4: sampling %d + extraction + curation", args.samples)
    curated_manifest, gate = generate_and_curate(model, schedule, adapters,
                                                 args.samples, run_dir, args.seed,
                                                 alpha=0.9)

    log.info("stage 5: segmentor sweep (baseline vs SYN)")
    eval_rng = np.random.default_rng(args.seed + 1)
    real = [ds.generate_phantom(ds.random_phantom_spec(
        eval_rng, list(ds.Trimester)[i % 3], height=args.size, width=args.size))
        for i in range(max(args.n_real * 4, 20))]
    real = [replace(p, id=f"real-{i:04d}") for i, p in enumerate(real)]
    val = [replace(ds.generate_phantom(ds.random_phantom_spec(
        eval_rng, list(ds.Trimester)[i % 3], height=args.size, width=args.size)),
        id=f"val-{i:04d}") for i in range(20)]
    test = [replace(ds.generate_phantom(ds.random_phantom_spec(
        eval_rng, list(ds.Trimester)[i % 3], height=args.size, width=args.size)),
        id=f"test-{i:04d}") for i in range(40)]
    synth_pool = [ds.load_pair(e) for e in curated_manifest.entries]

    grid = hn.SweepGrid(methods=("baseline", "SYN"), n_real_values=(args.n_real,),
                        seeds=tuple(args.seeds), total_budget=args.budget,
                        epochs=20, batch_size=5, learning_rate=args.lr)
    data_sources = hn.SweepData(real_train=real, val=val, test=test,
                                synth_pool=synth_pool)
    rows = hn.run_sweep(grid, data_sources, run_dir / "sweep")
    paths = hn.emit_reports(rows, run_dir / "reports")

    for row in rows:
        log.info("%s n_real=%d: %.4f ± %.4f", row.da_method, row.n_real,
                 row.mean_dsc, row.std_dsc)
    summary = {
        "gate": dict(gate),
        "curated": len(curated_manifest.entries),
        "rows": [{"method": r.da_method, "n_real": r.n_real, "mean": r.mean_dsc,
                  "std": r.std_dsc} for r in rows],
        "minutes": (time.time() - t0) / 60,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    log.info("done in %.1f min; reports at %s", summary["minutes"], paths["markdown"])


if __name__ == "__main__":
    main()
