"""The eight experiment commands.

Each command reads prerequisites from the configured output directory, writes
its artifacts there, and returns a result dict with a one-line summary plus
the artifact paths (relative to the output root). Randomness is derived from
the master seed and a per-command code, so re-running a command with the same
config and inputs reproduces its outputs bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import charts, diffusion, metrics, phantom, prototypes
from . import tensor as T
from .config import ExperimentConfig
from .errors import ConfigError, MissingPrerequisiteError
from .metrics import format_sig
from .prototypes import HEADS

DEFAULT_SAMPLE_COUNT = 8

# per-command seed stream codes; each command draws from
# default_rng([master_seed, code, ...]) so streams never collide
_SEED_CODES = {
    "gen-data": 0, "train-diffusion": 1, "sample": 2, "trajectory": 3,
    "train-proto": 4, "explain": 5, "evaluate": 6, "compare": 7,
}
_EXTRACTOR_STREAM = 0
_BANK_INIT_STREAM = 7  # shared by all heads so banks start from the same spot

COMMANDS = tuple(_SEED_CODES)


class RunPaths:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.data_dir = self.root / "data"
        self.data_manifest = self.data_dir / "manifest.json"
        self.ckpt_dir = self.root / "checkpoints"
        self.diffusion_ckpt = self.ckpt_dir / "diffusion.ckpt"
        self.train_log = self.root / "train_log.csv"
        self.samples_dir = self.root / "samples"
        self.samples_manifest = self.samples_dir / "manifest.json"
        self.traj_dir = self.root / "trajectory"
        self.traj_csv = self.root / "trajectory.csv"
        self.extractor_ckpt = self.ckpt_dir / "extractor.ckpt"
        self.extractor_meta = self.ckpt_dir / "extractor.json"
        self.metrics_csv = self.root / "metrics.csv"
        self.eval_summary = self.root / "evaluation_summary.json"
        self.comparison_csv = self.root / "comparison.csv"
        self.comparison_per_image = self.root / "comparison_per_image.csv"
        self.nis_csv = self.root / "nis_scores.csv"

    def proto_ckpt(self, head: str) -> Path:
        return self.ckpt_dir / f"proto_{head}.ckpt"

    def proto_meta(self, head: str) -> Path:
        return self.ckpt_dir / f"proto_{head}.json"

    def proto_log(self, head: str) -> Path:
        return self.root / f"proto_log_{head}.csv"

    def explanations_dir(self, head: str) -> Path:
        return self.root / "explanations" / head

    def rel(self, p: Path) -> str:
        return p.relative_to(self.root).as_posix()


def _paths(cfg: ExperimentConfig) -> RunPaths:
    return RunPaths(cfg.out_dir)


def _rng(cfg: ExperimentConfig, *codes: int) -> np.random.Generator:
    return np.random.default_rng([cfg.data.seed, *codes])


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise MissingPrerequisiteError(
            f"{what} not found at {path}; run `protodiff {hint}` first")
    return path


def _load_data(paths: RunPaths) -> phantom.Dataset:
    _require(paths.data_manifest, "dataset manifest", "gen-data")
    return phantom.load_dataset(paths.data_manifest)


def _load_net(cfg: ExperimentConfig, paths: RunPaths) -> diffusion.DenoiserNet:
    _require(paths.diffusion_ckpt, "denoiser checkpoint", "train-diffusion")
    net = diffusion.DenoiserNet(np.random.default_rng(0),
                                base_width=cfg.diffusion.base_width,
                                time_dim=cfg.diffusion.time_dim)
    net.load_state(T.load_checkpoint(paths.diffusion_ckpt))
    return net


def _load_extractor(paths: RunPaths) -> prototypes.FeatureExtractor:
    _require(paths.extractor_ckpt, "feature extractor checkpoint", "train-proto")
    return prototypes.FeatureExtractor.load(paths.extractor_ckpt,
                                            paths.extractor_meta)


def _schedule(cfg: ExperimentConfig) -> diffusion.NoiseSchedule:
    return diffusion.make_schedule(cfg.diffusion.timesteps,
                                   cfg.diffusion.beta_start,
                                   cfg.diffusion.beta_end)


def _write_csv(path: Path, header: str, rows: list[list]) -> None:
    lines = [header]
    for row in rows:
        lines.append(",".join(format_sig(c) if isinstance(c, float) else str(c)
                              for c in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _result(name: str, summary: str, paths: RunPaths,
            artifacts: list[Path], details: dict) -> dict:
    return {"command": name, "summary": summary,
            "artifacts": [paths.rel(a) for a in artifacts],
            "details": details}


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig) -> dict:
    paths = _paths(cfg)
    manifest = phantom.generate_dataset(cfg.data.n, cfg.data.seed,
                                        cfg.data.size, paths.data_dir)
    n_val = sum(1 for it in manifest.items if it.split == "val")
    summary = (f"generated {cfg.data.n} phantoms "
               f"({cfg.data.n - n_val} train / {n_val} val) "
               f"at {cfg.data.size}x{cfg.data.size} under {paths.data_dir}")
    artifacts = [paths.data_manifest]
    return _result("gen-data", summary, paths, artifacts,
                   {"n": cfg.data.n, "n_val": n_val,
                    "config_hash": manifest.config_hash})


def cmd_train_diffusion(cfg: ExperimentConfig) -> dict:
    paths = _paths(cfg)
    ds = _load_data(paths)
    train_idx = ds.indices("train")
    images = np.stack([ds.images[i] for i in train_idx])[:, None]
    masks = np.stack([ds.masks[i] for i in train_idx])[:, None]
    schedule = _schedule(cfg)
    rng = _rng(cfg, _SEED_CODES["train-diffusion"])
    net = diffusion.DenoiserNet(rng, base_width=cfg.diffusion.base_width,
                                time_dim=cfg.diffusion.time_dim)
    opt = T.AdamState(lr=cfg.diffusion.lr)
    n, bs = images.shape[0], cfg.diffusion.batch_size
    epoch_losses: list[float] = []
    for _ in range(cfg.diffusion.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            sel = order[start:start + bs]
            loss = diffusion.train_step(net, images[sel], masks[sel],
                                        schedule, rng, opt)
            total += loss * sel.size
        epoch_losses.append(total / n)
    paths.ckpt_dir.mkdir(parents=True, exist_ok=True)
    T.save_checkpoint(paths.diffusion_ckpt, net.params)
    _write_csv(paths.train_log, "epoch,loss",
               [[e, v] for e, v in enumerate(epoch_losses)])
    summary = (f"trained denoiser for {cfg.diffusion.epochs} epochs on {n} "
               f"images: loss {format_sig(epoch_losses[0])} -> "
               f"{format_sig(epoch_losses[-1])}")
    return _result("train-diffusion", summary, paths,
                   [paths.diffusion_ckpt, paths.train_log],
                   {"epoch_losses": epoch_losses})


def cmd_sample(cfg: ExperimentConfig, count: int | None = None) -> dict:
    paths = _paths(cfg)
    count = DEFAULT_SAMPLE_COUNT if count is None else int(count)
    if count < 1:
        raise ConfigError("sample count must be >= 1")
    ds = _load_data(paths)
    net = _load_net(cfg, paths)
    schedule = _schedule(cfg)
    rng = _rng(cfg, _SEED_CODES["sample"])
    pool = ds.indices("val") or ds.indices()
    paths.samples_dir.mkdir(parents=True, exist_ok=True)
    items = []
    artifacts = [paths.samples_manifest]
    for i in range(count):
        src = pool[i % len(pool)]
        img, _ = diffusion.sample(net, ds.masks[src], schedule, rng)
        name = f"sample_{i:04d}"
        out_path = paths.samples_dir / f"{name}.pgm"
        phantom.save_image(out_path, img)
        artifacts.append(out_path)
        src_item = ds.manifest.items[src]
        items.append({"id": name, "image": f"samples/{name}.pgm",
                      "mask_source": src_item.id,
                      "mask": f"data/{src_item.mask}",
                      "reference": f"data/{src_item.image}"})
    manifest = {"count": count, "size": cfg.data.size, "items": items}
    with open(paths.samples_manifest, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    summary = (f"sampled {count} images conditioned on {len(pool)} masks "
               f"into {paths.samples_dir}")
    return _result("sample", summary, paths, artifacts, {"count": count})


def cmd_trajectory(cfg: ExperimentConfig) -> dict:
    paths = _paths(cfg)
    ds = _load_data(paths)
    net = _load_net(cfg, paths)
    schedule = _schedule(cfg)
    rng = _rng(cfg, _SEED_CODES["trajectory"])
    pool = ds.indices("val") or ds.indices()
    mask = ds.masks[pool[0]]
    frames = diffusion.trajectory(net, mask, schedule, rng,
                                  cfg.diffusion.traj_stride)
    paths.traj_dir.mkdir(parents=True, exist_ok=True)
    artifacts = [paths.traj_csv]
    for fr in frames:
        p = paths.traj_dir / f"frame_t{fr.t:04d}.pgm"
        phantom.save_image(p, np.clip(fr.x_t, 0.0, 1.0))
        artifacts.append(p)
    _write_csv(paths.traj_csv, "t,eps_mag", [[fr.t, fr.eps_mag] for fr in frames])
    summary = (f"recorded {len(frames)} trajectory frames (stride "
               f"{cfg.diffusion.traj_stride}): eps_mag "
               f"{format_sig(frames[0].eps_mag)} at t={frames[0].t} -> "
               f"{format_sig(frames[-1].eps_mag)} at t={frames[-1].t}")
    return _result("trajectory", summary, paths, artifacts,
                   {"eps_mags": {fr.t: fr.eps_mag for fr in frames},
                    "conditioned_on": ds.item_id(pool[0])})


def _head_or_raise(head: str | None) -> str:
    if head is None:
        raise ConfigError("this command needs --head")
    if head not in HEADS:
        raise ConfigError(f"unknown head {head!r}; choose from {HEADS}")
    return head


def cmd_train_proto(cfg: ExperimentConfig, head: str | None) -> dict:
    paths = _paths(cfg)
    head = _head_or_raise(head)
    ds = _load_data(paths)
    train_idx = ds.indices("train")
    images = np.stack([ds.images[i] for i in train_idx])
    ids = [ds.item_id(i) for i in train_idx]
    pr = cfg.prototypes
    paths.ckpt_dir.mkdir(parents=True, exist_ok=True)

    artifacts = []
    if paths.extractor_ckpt.exists():
        extractor = _load_extractor(paths)
    else:
        ext_rng = _rng(cfg, _SEED_CODES["train-proto"], _EXTRACTOR_STREAM)
        extractor = prototypes.train_extractor(
            images, ext_rng, feat_hw=pr.feat_hw, feat_dim=pr.feat_dim,
            epochs=pr.extractor_epochs, lr=pr.extractor_lr,
            batch_size=cfg.diffusion.batch_size)
        extractor.save(paths.extractor_ckpt, paths.extractor_meta)
        artifacts += [paths.extractor_ckpt, paths.extractor_meta]

    init_rng = _rng(cfg, _SEED_CODES["train-proto"], _BANK_INIT_STREAM)
    feats = extractor.features_batch(images)
    bank = prototypes.PrototypeBank(
        prototypes.init_prototypes(init_rng, feats, pr.m), head,
        lambda_div=pr.lambda_div)
    bank = prototypes.train_head(bank, extractor, images,
                                 _rng(cfg, _SEED_CODES["train-proto"]),
                                 epochs=pr.epochs, lr=pr.lr, image_ids=ids)
    bank.save(paths.proto_ckpt(head), paths.proto_meta(head))
    history = bank.train_history
    _write_csv(paths.proto_log(head), "step,objective",
               [[i, v] for i, v in enumerate(history)])
    artifacts += [paths.proto_ckpt(head), paths.proto_meta(head),
                  paths.proto_log(head)]
    pushed = "pushed onto training patches" if head != "protopool" \
        else "kept as soft pool vectors"
    summary = (f"trained {head} ({pr.m} prototypes, {pr.epochs} steps): "
               f"objective {format_sig(history[0])} -> "
               f"{format_sig(history[-1])}; {pushed}")
    return _result("train-proto", summary, paths, artifacts,
                   {"head": head, "objective": history})


def _load_samples(paths: RunPaths) -> dict:
    _require(paths.samples_manifest, "samples manifest", "sample")
    with open(paths.samples_manifest, "r", encoding="utf-8") as fh:
        return json.load(fh)


def cmd_explain(cfg: ExperimentConfig, head: str | None,
                image_ids: list[str] | None = None) -> dict:
    paths = _paths(cfg)
    head = _head_or_raise(head)
    _require(paths.proto_ckpt(head), f"{head} checkpoint", f"train-proto --head {head}")
    extractor = _load_extractor(paths)
    bank = prototypes.PrototypeBank.load(paths.proto_ckpt(head),
                                         paths.proto_meta(head))
    samples = _load_samples(paths)
    by_id = {it["id"]: it for it in samples["items"]}
    if image_ids is None:
        image_ids = list(by_id)
    if not image_ids:
        raise ConfigError("no generated images to explain")
    out_dir = paths.explanations_dir(head)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    scores = {}
    for image_id in image_ids:
        if image_id not in by_id:
            raise ConfigError(f"unknown generated image id {image_id!r}")
        img = phantom.load_image(paths.root / by_id[image_id]["image"])
        report = prototypes.explain(bank, extractor, img, image_id)
        p = out_dir / f"{image_id}.json"
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        artifacts.append(p)
        scores[image_id] = report.faithfulness
    mean_f = float(np.mean(list(scores.values())))
    summary = (f"explained {len(image_ids)} images with {head}: "
               f"mean faithfulness {format_sig(mean_f)}")
    return _result("explain", summary, paths, artifacts,
                   {"head": head, "faithfulness": scores})


def cmd_evaluate(cfg: ExperimentConfig) -> dict:
    paths = _paths(cfg)
    samples = _load_samples(paths)
    _require(paths.data_manifest, "dataset manifest", "gen-data")
    mc = cfg.metrics.to_metric_config()
    pnet = metrics.PerceptualNet(cfg.metrics.lpips_seed)
    thr = cfg.metrics.dice_threshold
    rows = []
    gen_images = []
    for it in samples["items"]:
        gen = phantom.load_image(paths.root / it["image"])
        ref = phantom.load_image(paths.root / it["reference"])
        mask = phantom.load_image(paths.root / it["mask"])
        seg = (gen >= thr).astype(np.float64)
        rows.append({"image_id": it["id"],
                     "psnr": metrics.psnr(gen, ref, mc),
                     "ssim": metrics.ssim(gen, ref, mc),
                     "lpips": metrics.lpips(gen, ref, pnet, mc),
                     "dice": metrics.dice(mask, seg)})
        gen_images.append(gen)
    metrics.write_metrics_csv(paths.metrics_csv, rows)

    frechet = None
    if paths.extractor_ckpt.exists():
        extractor = _load_extractor(paths)
        ds = _load_data(paths)
        val_idx = ds.indices("val") or ds.indices()
        if len(gen_images) >= 2 and len(val_idx) >= 2:
            gen_feats = extractor.features_batch(np.stack(gen_images))
            ref_feats = extractor.features_batch(
                np.stack([ds.images[i] for i in val_idx]))
            frechet = metrics.frechet_distance(
                gen_feats.mean(axis=(1, 2)), ref_feats.mean(axis=(1, 2)))

    def agg(key: str) -> dict:
        vals = np.array([r[key] for r in rows])
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        return {"mean": float(vals.mean()), "std": std}

    stats = {k: agg(k) for k in ("psnr", "ssim", "lpips", "dice")}
    summary_doc = {"n": len(rows), "metrics": stats, "frechet": frechet,
                   "dice_threshold": thr,
                   "dice_definition": "conditioning mask vs generated image "
                                      f"thresholded at {thr}"}
    with open(paths.eval_summary, "w", encoding="utf-8") as fh:
        json.dump(summary_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    fre = "n/a" if frechet is None else format_sig(frechet)
    summary = (f"evaluated {len(rows)} samples: "
               f"psnr {format_sig(stats['psnr']['mean'])} "
               f"ssim {format_sig(stats['ssim']['mean'])} "
               f"lpips {format_sig(stats['lpips']['mean'])} "
               f"dice {format_sig(stats['dice']['mean'])} "
               f"frechet {fre}")
    return _result("evaluate", summary, paths,
                   [paths.metrics_csv, paths.eval_summary],
                   {"stats": stats, "frechet": frechet})


def cmd_compare(cfg: ExperimentConfig) -> dict:
    paths = _paths(cfg)
    samples = _load_samples(paths)
    heads = cfg.prototypes.heads
    for head in heads:
        _require(paths.proto_ckpt(head), f"{head} checkpoint",
                 f"train-proto --head {head}")
    extractor = _load_extractor(paths)

    per_image_rows: list[list] = []
    nis_rows: list[list] = []
    head_stats: dict[str, dict] = {}
    nis_by_head: dict[str, list[float]] = {}
    per_image: dict[str, dict[str, float]] = {}
    for head in heads:
        bank = prototypes.PrototypeBank.load(paths.proto_ckpt(head),
                                             paths.proto_meta(head))
        scores = []
        flat_nis: list[float] = []
        per_image[head] = {}
        for it in samples["items"]:
            img = phantom.load_image(paths.root / it["image"])
            report = prototypes.explain(bank, extractor, img, it["id"])
            scores.append(report.faithfulness)
            per_image[head][it["id"]] = report.faithfulness
            per_image_rows.append([head, it["id"], report.faithfulness])
            for rec in report.records:
                nis_rows.append([head, it["id"], rec.j, rec.nis])
                flat_nis.append(rec.nis)
        arr = np.array(scores)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        head_stats[head] = {"n": arr.size, "mean_f": float(arr.mean()),
                            "std_f": std, "m": bank.m}
        nis_by_head[head] = flat_nis

    _write_csv(paths.comparison_csv, "head,n,m,mean_f,std_f",
               [[h, s["n"], s["m"], s["mean_f"], s["std_f"]]
                for h, s in head_stats.items()])
    _write_csv(paths.comparison_per_image, "head,image_id,f", per_image_rows)
    _write_csv(paths.nis_csv, "head,image_id,prototype,nis", nis_rows)
    artifacts = [paths.comparison_csv, paths.comparison_per_image,
                 paths.nis_csv]

    chart = paths.root / "faithfulness_bar.pgm"
    charts.render_bar_chart([head_stats[h]["mean_f"] for h in heads], chart)
    artifacts.append(chart)
    for head in heads:
        hist = paths.root / f"nis_hist_{head}.pgm"
        charts.render_histogram(nis_by_head[head], hist)
        artifacts.append(hist)

    ranked = sorted(head_stats, key=lambda h: -head_stats[h]["mean_f"])
    summary = "compared heads on {} images: {}".format(
        len(samples["items"]),
        ", ".join(f"{h} F={format_sig(head_stats[h]['mean_f'])}" for h in ranked))
    return _result("compare", summary, paths, artifacts,
                   {"head_stats": head_stats, "ranking": ranked,
                    "per_image": per_image})


def run_command(name: str, cfg: ExperimentConfig, head: str | None = None,
                count: int | None = None,
                image_ids: list[str] | None = None) -> dict:
    if name == "gen-data":
        return cmd_gen_data(cfg)
    if name == "train-diffusion":
        return cmd_train_diffusion(cfg)
    if name == "sample":
        return cmd_sample(cfg, count)
    if name == "trajectory":
        return cmd_trajectory(cfg)
    if name == "train-proto":
        return cmd_train_proto(cfg, head)
    if name == "explain":
        return cmd_explain(cfg, head, image_ids)
    if name == "evaluate":
        return cmd_evaluate(cfg)
    if name == "compare":
        return cmd_compare(cfg)
    raise ConfigError(f"unknown command {name!r}")
