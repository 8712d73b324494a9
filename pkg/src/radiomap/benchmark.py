"""End-to-end dataset generation and loading.

Directory layout written by :func:`generate_dataset`::

    scenes/<scene_id>.rmg          occupancy, heights, road planes
    scenes/<scene_id>.meta.txt     scene config and BS list
    gains/<scene_id>_bs<k>.rmg     full-scene gain map (dB)
    patches/<stem>.rmg             prior planes + target gain "G" (dB)
    patches/<stem>.<tag>.rmg       observation planes Gs (dB), Ms
    manifest.tsv                   one line per (patch, sampling variant)
    sampling.txt                   digest -> sampling config
    norm_stats.txt                 statistics of the train split
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .datasetio import (
    ManifestRow,
    PatchConstraints,
    build_splits,
    config_digest,
    extract_patches,
    read_manifest,
    read_rmg,
    read_sidecar,
    write_manifest,
    write_rmg,
    write_sidecar,
)
from .fieldsim import PropagationParams, simulate_gain
from .priors import PRIOR_CHANNELS, NormStats, PriorTensor, build_priors, compute_norm_stats, normalize_gain, raw_stack
from .sampling import SamplingConfig, init_fill, observe, sample_mask
from .scenegen import SceneConfig, generate_scene, place_base_stations

logger = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class DatasetConfig:
    scenes: tuple[str, ...] = ("crossroad", "building_dense")
    grid_size: int = 256
    extent_m: float = 400.0
    n_bs: int = 2
    bs_modes: str = "mixed"
    patches_per_bs: int = 40
    patch_size: int = 64
    sampling: tuple[SamplingConfig, ...] = (SamplingConfig("random", 0.10),)
    propagation: PropagationParams = field(default_factory=PropagationParams)
    constraints: PatchConstraints = field(default_factory=PatchConstraints)
    split_ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0


def _scene_id(k: int, category: str) -> str:
    return f"s{k:02d}_{category}"


def generate_dataset(cfg: DatasetConfig, out_dir) -> str:
    """Generate the whole benchmark under ``out_dir``; returns the manifest path."""
    for sub in ("scenes", "gains", "patches"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    records = []
    bundles = {}
    constraints = cfg.constraints
    if any(s.mode == "road" for s in cfg.sampling) and constraints.min_road_cells < 1:
        constraints = replace(constraints, min_road_cells=1)
    for k, category in enumerate(cfg.scenes):
        sid = _scene_id(k, category)
        scfg = SceneConfig(category=category, extent_m=cfg.extent_m, grid_size=cfg.grid_size, seed=derive_seed(cfg.seed, k))
        scene = generate_scene(scfg)
        bss = place_base_stations(scene, cfg.n_bs, cfg.bs_modes, seed=derive_seed(cfg.seed, k, 1))
        write_rmg(
            os.path.join(out_dir, "scenes", f"{sid}.rmg"),
            {"occupancy": scene.occupancy.astype(float), "heights": scene.heights, "road": scene.road_mask.astype(float)},
        )
        meta = {f"config.{kk}": v for kk, v in vars(scfg).items()}
        meta["cell_size_m"] = scene.cell_size_m
        meta["rooftop_offset_m"] = 2.0
        meta["roadside_height_m"] = 10.0
        for b in bss:
            meta[f"bs.{b.id}"] = f"{b.mode},{b.position[0]:.6f},{b.position[1]:.6f},{b.position[2]:.6f}"
        write_sidecar(os.path.join(out_dir, "scenes", f"{sid}.meta.txt"), meta)

        for b in bss:
            params = replace(cfg.propagation, seed=derive_seed(cfg.seed, k, 2))
            gain = simulate_gain(scene, b, params)
            write_rmg(os.path.join(out_dir, "gains", f"{sid}_bs{b.id}.rmg"), {"G": gain.values})
            priors = build_priors(scene, b, params.rx_height_m)
            recs = extract_patches(
                scene, b, gain, priors, cfg.patches_per_bs, cfg.patch_size, constraints,
                seed=derive_seed(cfg.seed, k, 3, b.id), scene_id=sid,
            )
            for r in recs:
                bundles[r.patch_id] = (scene, priors, gain.values)
            records.extend(recs)

    splits = build_splits([r.patch_id for r in records], cfg.split_ratios, seed=derive_seed(cfg.seed, 4))
    digests = {s.tag: config_digest(s) for s in cfg.sampling}
    rows = []
    train_priors = []
    for n, rec in enumerate(records):
        rec.split = splits[rec.patch_id]
        scene, priors, g = bundles[rec.patch_id]
        r0, c0 = rec.origin
        sl = (slice(r0, r0 + rec.size), slice(c0, c0 + rec.size))
        pc = priors.crop(r0, c0, rec.size)
        stem = f"{rec.scene_id}_bs{rec.bs_id}_r{r0}_c{c0}"
        base = os.path.join("patches", f"{stem}.rmg")
        write_rmg(os.path.join(out_dir, base), {**pc.planes(), "G": g[sl]})
        rec.files = [base]
        if rec.split == "train":
            train_priors.append(pc)
        for v, scfg in enumerate(cfg.sampling):
            scfg = replace(scfg, seed=derive_seed(cfg.seed, 5, n, v))
            ms = sample_mask(pc.Ma, scene.road_mask[sl], scfg)
            obs = observe(g[sl], ms, scfg.noise_std_db, scfg.seed, scfg)
            vpath = os.path.join("patches", f"{stem}.{scfg.tag}.rmg")
            write_rmg(os.path.join(out_dir, vpath), {"Gs": obs.Gs, "Ms": ms.astype(float)})
            rec.variants[scfg.tag] = vpath
            rows.append(ManifestRow(rec.patch_id, rec.split, (base, vpath), digests[scfg.tag]))

    manifest = os.path.join(out_dir, "manifest.tsv")
    write_manifest(manifest, rows)
    with open(os.path.join(out_dir, "sampling.txt"), "w", encoding="utf-8") as fh:
        for s in cfg.sampling:
            fh.write(f"{digests[s.tag]}\ttag={s.tag};mode={s.mode};ratio={s.ratio};noise_std_db={s.noise_std_db}\n")
    write_sidecar(os.path.join(out_dir, "norm_stats.txt"), compute_norm_stats(train_priors).to_dict())
    logger.info("wrote %d patches (%d manifest rows) to %s", len(records), len(rows), out_dir)
    return manifest


@dataclass
class Split:
    ids: list[str]
    raw: np.ndarray  # (N, 11, H, W), gains in dB
    target_db: np.ndarray  # (N, H, W)

    def __len__(self):
        return len(self.ids)

    @property
    def target_norm(self) -> np.ndarray:
        return normalize_gain(self.target_db)


def load_patch(root, row: ManifestRow) -> tuple[PriorTensor, np.ndarray, np.ndarray, np.ndarray]:
    base = read_rmg(os.path.join(root, row.files[0])).as_dict()
    obs = read_rmg(os.path.join(root, row.files[1])).as_dict()
    pri = PriorTensor(**{k: base[k].astype(np.float64) for k in PRIOR_CHANNELS})
    return pri, base["G"].astype(np.float64), obs["Gs"].astype(np.float64), obs["Ms"] > 0.5


def load_dataset(manifest_path, tag: str | None = None) -> tuple[dict[str, Split], NormStats]:
    """Read every split; ``Ginit`` is rebuilt from the stored observations."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    rows = read_manifest(manifest_path)
    if tag is not None:
        rows = [r for r in rows if r.files[1].endswith(f".{tag}.rmg")]
    else:
        first = rows[0].files[1].rsplit(".", 2)[-2] if rows else None
        rows = [r for r in rows if r.files[1].endswith(f".{first}.rmg")]
    parts: dict[str, tuple[list, list, list]] = {s: ([], [], []) for s in ("train", "val", "test")}
    for r in rows:
        pri, g, gs, ms = load_patch(root, r)
        ginit = init_fill(gs, ms, pri.Ma)
        ids, raws, ts = parts[r.split]
        ids.append(r.patch_id)
        raws.append(raw_stack(pri, gs, ms, ginit))
        ts.append(g)
    splits = {}
    for s, (ids, raws, ts) in parts.items():
        if raws:
            splits[s] = Split(ids, np.stack(raws), np.stack(ts))
        else:
            splits[s] = Split([], np.zeros((0,)), np.zeros((0,)))
    stats_path = os.path.join(root, "norm_stats.txt")
    if os.path.exists(stats_path):
        stats = NormStats.from_dict(read_sidecar(stats_path))
    else:
        stats = compute_norm_stats(splits["train"].raw)
    return splits, stats
