"""Scratch tuning script for the training protocol (not part of the package)."""
import sys
import numpy as np
from occprior.harness import (
    SceneConfig, generate_scene, train_on_frames, two_pass_protocol,
    run_pipeline, PipelineOptions,
)
from occprior.mapstore import TileStore, fetch_prior
from occprior.fusion import fuse
from occprior.grid import ClassPartition, FeatureGrid, decode_labels, channel_to_height


def diagnose(frames, w, spec):
    store = TileStore(spec)
    p1, store = run_pipeline(frames, store, w)
    p2, store = run_pipeline(frames, store, w)
    f = frames[len(frames) // 2]
    fi = len(frames) // 2
    prior, valid = fetch_prior(store, f.pose, spec)
    out = fuse(f.current_feature, prior, w)
    a = out.alpha.values.mean(axis=2)
    colmax = f.degraded_logits.values.reshape(spec.dims[0], spec.dims[1], -1).max(axis=2)
    sector = colmax < 7.0
    tr = f.truth.labels
    static_box = np.isin(tr, [12, 13, 14, 15, 16])
    sect_vox = np.repeat(sector[:, :, None], spec.dims[2], axis=2)
    sel = static_box & sect_vox
    pl = decode_labels(channel_to_height(FeatureGrid(prior.values), spec))
    print(f"    alpha sector={a[sector].mean():.3f} clean={a[~sector].mean():.3f} | "
          f"sector-static: prior={100*(pl.labels[sel]==tr[sel]).mean():.1f}% "
          f"fused-p2={100*(p2[fi].labels[sel]==tr[sel]).mean():.1f}% (n={sel.sum()})")


def main():
    cfg = SceneConfig(seed=1234, occlusion_rate=0.4, noise_sigma=1.0)
    world, frames = generate_scene(cfg)
    spec = cfg.spec
    configs = [
        dict(steps=700, lr=0.35, corrupt_prior_rate=0.3, self_train_fraction=0.3),
        dict(steps=700, lr=0.35, corrupt_prior_rate=0.15, self_train_fraction=0.15),
        dict(steps=900, lr=0.35, corrupt_prior_rate=0.2, self_train_fraction=0.2),
    ]
    for kw in configs:
        w, losses = train_on_frames(frames, seed=7, **kw)
        res = two_pass_protocol(frames, w)
        g = res.gaps()
        print(f"{kw}")
        print(f"    base={res.baseline.result.all_:.3f} p1={res.pass1.result.all_:.3f} p2={res.pass2.result.all_:.3f} "
              f"gap_all={g.all_:.3f} gap_st={g.static_:.3f} gap_dy={g.dynamic:.3f}")
        diagnose(frames, w, spec)
        sys.stdout.flush()


if __name__ == "__main__":
    main()
