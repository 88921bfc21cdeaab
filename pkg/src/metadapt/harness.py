"""Experiment orchestration: the staged protocol, metric computation,
checkpoint lifecycle, and run comparison.

Stages communicate exclusively through files in the run directory:

    run_dir/
      config.json          resolved configuration + derived stage seeds
      data/                dataset (see synthdata for layout)
      centroids.ckpt       cluster artifact (centroids + frozen standardization)
      assignments.csv      sample_id, cluster (+ provenance with --with-provenance)
      codes.csv            style code per target sample
      source_only.ckpt, split.ckpt, fuse.ckpt, meta.ckpt
      *_log.csv            per-iteration training scalars
      eval_*.json/csv      metric reports
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn, synthdata
from .checkpoint import load_container, save_container
from .cluster import KMeans, StyleFeatureExtractor, cluster_report
from .config import ExperimentConfig, all_stage_seeds, stage_seed
from .fuse import (
    FUSION_VARIANTS,
    Hypernetwork,
    branch_probs,
    combine_branches,
    fusion_weights,
    train_fuse,
)
from .meta import final_training_lr, maml_train, online_update
from .split import train_split


class StageError(RuntimeError):
    """A stage was invoked without its predecessor's artifact."""


# -- metrics ----------------------------------------------------------------------


def confusion_matrix(preds: np.ndarray, labels: np.ndarray, m: int) -> np.ndarray:
    """Integer (m, m) matrix; rows are truth, columns are prediction."""
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"prediction/label size mismatch: {preds.shape} vs {labels.shape}")
    conf = np.zeros((m, m), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    return conf


def miou(conf: np.ndarray) -> tuple[list, float]:
    """Per-class IoU and their mean.

    A class absent from both truth and prediction contributes no IoU entry
    and is excluded from the mean.
    """
    m = conf.shape[0]
    per_class: list = []
    for c in range(m):
        tp = conf[c, c]
        denom = conf[c, :].sum() + conf[:, c].sum() - tp
        per_class.append(float(tp / denom) if denom > 0 else None)
    present = [x for x in per_class if x is not None]
    return per_class, float(np.mean(present)) if present else 0.0


# -- model construction and checkpoints ---------------------------------------------


def build_models(cfg: ExperimentConfig, seed: int):
    """Fresh G and D from the same named init streams the trainers use."""
    from .split import stage_rngs

    rngs = stage_rngs(seed)
    g = nn.SegNet(
        rngs["g_init"],
        num_classes=cfg.num_classes,
        num_target_banks=cfg.k,
        widths=cfg.segnet_widths,
        bn_momentum=cfg.bn_momentum,
        bn_eps=cfg.bn_eps,
    )
    d = nn.Discriminator(rngs["d_init"], in_channels=cfg.num_classes)
    return g, d


def save_bundle(path, cfg: ExperimentConfig, stage: str, iteration: int,
                G, D=None, H=None, optimizers: dict | None = None) -> None:
    arrays = {f"segnet.{n}": a for n, a in G.state_arrays().items()}
    if D is not None:
        arrays.update({f"disc.{n}": a for n, a in D.state_arrays().items()})
    if H is not None:
        arrays.update({f"hyper.{n}": a for n, a in H.state_arrays().items()})
    for prefix, opt in (optimizers or {}).items():
        arrays.update(opt.state_arrays(prefix))
    arrays["iteration"] = np.array([float(iteration)])
    manifest = {
        "kind": "model",
        "stage": stage,
        "m": cfg.num_classes,
        "k": cfg.k,
        "iteration": iteration,
        "layers": sorted(arrays),
        "config": cfg.to_dict(),
    }
    save_container(path, manifest, arrays)


def load_bundle(path, cfg: ExperimentConfig | None = None):
    """(manifest, G, D or None, H or None); config defaults to the stored one."""
    manifest, arrays = load_container(path)
    if manifest.get("kind") != "model":
        raise StageError(f"{path} is not a model checkpoint")
    cfg = cfg if cfg is not None else ExperimentConfig.from_dict(manifest["config"])
    G, D = build_models(cfg, seed=0)
    G.load_state_arrays({n[len("segnet."):]: a for n, a in arrays.items()
                         if n.startswith("segnet.")})
    disc_arrays = {n[len("disc."):]: a for n, a in arrays.items() if n.startswith("disc.")}
    if disc_arrays:
        D.load_state_arrays(disc_arrays)
    else:
        D = None
    hyper_arrays = {n[len("hyper."):]: a for n, a in arrays.items() if n.startswith("hyper.")}
    H = None
    if hyper_arrays:
        H = Hypernetwork(np.random.default_rng(0), in_dim=cfg.style_dim,
                         hidden=cfg.hyper_hidden, k=cfg.k)
        H.load_state_arrays(hyper_arrays)
    return manifest, G, D, H


def save_cluster_artifact(path, cfg: ExperimentConfig, extractor, km: KMeans) -> None:
    arrays = dict(extractor.state_arrays())
    arrays["centroids"] = km.centroids_
    manifest = {
        "kind": "cluster",
        "k": cfg.k,
        "style_dim": cfg.style_dim,
        "seed": km.seed,
        "inertia": km.inertia_,
        "n_iter": km.n_iter_,
        "config": cfg.to_dict(),
    }
    save_container(path, manifest, arrays)


def load_cluster_artifact(path):
    manifest, arrays = load_container(path)
    if manifest.get("kind") != "cluster":
        raise StageError(f"{path} is not a cluster artifact")
    extractor = StyleFeatureExtractor()
    extractor.load_state_arrays(arrays)
    return manifest, extractor, arrays["centroids"]


def write_csv(path, rows: list, fieldnames: list | None = None) -> None:
    if not rows:
        Path(path).write_text("")
        return
    fieldnames = fieldnames or list(rows[0])
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fieldnames)
        wr.writeheader()
        for row in rows:
            wr.writerow(row)


# -- prediction / evaluation ---------------------------------------------------------


def predict_labels(
    G,
    H,
    images: np.ndarray,
    codes: np.ndarray | None,
    centroids: np.ndarray | None,
    stage: str,
    cfg: ExperimentConfig,
    fusion: str | None = None,
    batch: int = 16,
) -> np.ndarray:
    """Label maps under the routing scheme implied by the training stage.

    source_only: source bank everywhere; split: nearest-centroid branch
    routing; fuse/meta: convex combination under the configured variant.
    """
    preds = []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            chunk = images[i : i + batch]
            if stage == "source_only":
                p = G.forward(chunk, bank=0, train=False)
                preds.append(p.data.argmax(axis=1))
                continue
            ck = codes[i : i + batch]
            if stage == "split":
                d2 = ((ck[:, None, :] - centroids[None]) ** 2).sum(axis=2)
                banks = d2.argmin(axis=1) + 1
                out = np.zeros((len(chunk), cfg.num_classes) + chunk.shape[2:])
                for b in np.unique(banks):
                    idx = np.flatnonzero(banks == b)
                    out[idx] = G.forward(chunk[idx], bank=int(b), train=False).data
                preds.append(out.argmax(axis=1))
            else:  # fuse / meta
                w = fusion_weights(fusion or cfg.fusion, ck, H, centroids, cfg.distance_temp)
                fused = combine_branches(branch_probs(G, chunk), w)
                preds.append(fused.data.argmax(axis=1))
    return np.concatenate(preds)


def evaluate_checkpoint(
    ckpt_path,
    data_dir,
    centroids_path,
    fusion: str | None = None,
) -> dict:
    """Target and open-domain mIoU for one checkpoint, with per-sub-domain
    breakdown from the sealed provenance."""
    manifest, G, _, H = load_bundle(ckpt_path)
    cfg = ExperimentConfig.from_dict(manifest["config"])
    stage = manifest["stage"]
    bundle = synthdata.load_dataset(data_dir, with_sealed=True)
    _, extractor, centroids = load_cluster_artifact(centroids_path)

    report = {"stage": stage, "checkpoint": str(ckpt_path), "fusion": fusion or cfg.fusion}
    sealed = bundle.eval_only["target"]
    codes = extractor.transform(bundle.target.images)
    preds = predict_labels(G, H, bundle.target.images, codes, centroids, stage, cfg, fusion)
    conf = confusion_matrix(preds, sealed.labels, cfg.num_classes)
    per_class, mean = miou(conf)
    report["target"] = {"miou": mean, "per_class_iou": per_class,
                        "pixels": int(conf.sum())}
    domains = sorted(set(sealed.provenance))
    by_domain = {}
    for dom in domains:
        idx = [i for i, p in enumerate(sealed.provenance) if p == dom]
        conf_d = confusion_matrix(preds[idx], sealed.labels[idx], cfg.num_classes)
        by_domain[dom] = miou(conf_d)[1]
    report["target"]["by_domain"] = by_domain

    report["open"] = {}
    for name, split in bundle.open_sets.items():
        codes_o = extractor.transform(split.images)
        preds_o = predict_labels(G, H, split.images, codes_o, centroids, stage, cfg, fusion)
        labels_o = bundle.eval_only[f"open:{name}"].labels
        conf_o = confusion_matrix(preds_o, labels_o, cfg.num_classes)
        per_class_o, mean_o = miou(conf_o)
        report["open"][name] = {"miou": mean_o, "per_class_iou": per_class_o}
    return report


# -- stage runners --------------------------------------------------------------------


def _require(path, what: str, hint: str):
    if not Path(path).exists():
        raise StageError(f"missing {what} at {path}; run `{hint}` first")
    return path


def run_gen_data(cfg: ExperimentConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    data_dir = run_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    bundle = synthdata.make_dataset(
        cfg.source_count, cfg.target_count, cfg.open_count, stage_seed(cfg.master_seed, "data")
    )
    synthdata.save_dataset(bundle, data_dir)
    (run_dir / "config.json").write_text(
        json.dumps({**cfg.to_dict(), "stage_seeds": all_stage_seeds(cfg.master_seed)},
                   indent=2, sort_keys=True)
    )
    return data_dir


def run_cluster(cfg: ExperimentConfig, run_dir, with_provenance: bool = False) -> Path:
    run_dir = Path(run_dir)
    data_dir = _require(run_dir / "data", "dataset", "metadapt gen-data")
    bundle = synthdata.load_dataset(data_dir, with_sealed=with_provenance)
    extractor = StyleFeatureExtractor().fit(bundle.target.images)
    codes = extractor.transform(bundle.target.images)
    km = KMeans(cfg.k, seed=stage_seed(cfg.master_seed, "cluster")).fit(codes)

    out = run_dir / "centroids.ckpt"
    save_cluster_artifact(out, cfg, extractor, km)
    rows = []
    for i, c in enumerate(km.labels_):
        row = {"sample_id": i, "cluster": int(c)}
        if with_provenance:
            row["provenance"] = bundle.eval_only["target"].provenance[i]
        rows.append(row)
    write_csv(run_dir / "assignments.csv", rows)
    write_csv(
        run_dir / "codes.csv",
        [
            {"sample_id": i, **{f"c{j}": codes[i, j] for j in range(codes.shape[1])}}
            for i in range(len(codes))
        ],
    )
    return out


def _load_cluster_inputs(run_dir, cfg):
    data_dir = _require(Path(run_dir) / "data", "dataset", "metadapt gen-data")
    centroids_path = _require(Path(run_dir) / "centroids.ckpt", "cluster artifact",
                              "metadapt cluster")
    bundle = synthdata.load_dataset(data_dir)
    _, extractor, centroids = load_cluster_artifact(centroids_path)
    codes = extractor.transform(bundle.target.images)
    assignments = np.array(
        [int(np.argmin(((c - centroids) ** 2).sum(axis=1))) for c in codes]
    )
    return bundle, extractor, centroids, codes, assignments


def run_train_split(cfg: ExperimentConfig, run_dir, source_only: bool = False) -> Path:
    run_dir = Path(run_dir)
    bundle, _, _, _, assignments = _load_cluster_inputs(run_dir, cfg)
    lam1 = 0.0 if source_only else cfg.lambda1
    G, D, rows = train_split(
        bundle.source.images,
        bundle.source.labels,
        bundle.target.images,
        None if source_only else assignments,
        cfg,
        stage_seed(cfg.master_seed, "split"),
        lam1=lam1,
    )
    stage = "source_only" if source_only else "split"
    out = run_dir / f"{stage}.ckpt"
    save_bundle(out, cfg, stage, cfg.split_iters, G, D)
    write_csv(run_dir / f"{stage}_log.csv", rows)
    return out


def run_train_fuse(cfg: ExperimentConfig, run_dir, fusion: str | None = None) -> Path:
    run_dir = Path(run_dir)
    fusion = fusion or cfg.fusion
    if fusion not in FUSION_VARIANTS:
        raise StageError(f"unknown fusion variant {fusion!r}")
    split_ckpt = _require(run_dir / "split.ckpt", "split checkpoint", "metadapt train-split")
    bundle, _, centroids, codes, _ = _load_cluster_inputs(run_dir, cfg)
    _, G, D, _ = load_bundle(split_ckpt, cfg)
    H, rows = train_fuse(
        G, D,
        bundle.source.images, bundle.source.labels,
        bundle.target.images, codes, centroids,
        cfg, stage_seed(cfg.master_seed, "fuse"), fusion=fusion,
    )
    out = run_dir / ("fuse.ckpt" if fusion == cfg.fusion else f"fuse_{fusion}.ckpt")
    save_bundle(out, cfg, "fuse", cfg.fuse_iters, G, D, H)
    # record which variant trained this checkpoint
    manifest, arrays = load_container(out)
    manifest["fusion"] = fusion
    save_container(out, manifest, arrays)
    write_csv(run_dir / f"fuse_{fusion}_log.csv", rows)
    return out


def run_train_meta(cfg: ExperimentConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    split_ckpt = _require(run_dir / "split.ckpt", "split checkpoint", "metadapt train-split")
    bundle, _, centroids, codes, assignments = _load_cluster_inputs(run_dir, cfg)
    _, G, D, _ = load_bundle(split_ckpt, cfg)
    H, rows = maml_train(
        G, None, D,
        bundle.source.images, bundle.source.labels,
        bundle.target.images, codes, centroids, assignments,
        cfg, stage_seed(cfg.master_seed, "meta"),
    )
    out = run_dir / "meta.ckpt"
    save_bundle(out, cfg, "meta", cfg.meta_iters, G, D, H)
    write_csv(run_dir / "meta_log.csv", rows)
    return out


def run_eval(cfg: ExperimentConfig, run_dir, ckpt: str | None = None,
             fusion: str | None = None) -> dict:
    run_dir = Path(run_dir)
    if ckpt is None:
        for candidate in ("meta.ckpt", "fuse.ckpt", "split.ckpt", "source_only.ckpt"):
            if (run_dir / candidate).exists():
                ckpt = run_dir / candidate
                break
        else:
            raise StageError(f"no checkpoint found in {run_dir}")
    ckpt = Path(ckpt)
    report = evaluate_checkpoint(
        ckpt,
        _require(run_dir / "data", "dataset", "metadapt gen-data"),
        _require(run_dir / "centroids.ckpt", "cluster artifact", "metadapt cluster"),
        fusion=fusion,
    )
    out = run_dir / f"eval_{ckpt.stem}.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def run_eval_online(
    cfg: ExperimentConfig,
    run_dir,
    online: bool = True,
    stream_order: str = "manifest",
    ckpt: str | None = None,
) -> dict:
    """Streaming open-domain evaluation with optional per-image updates.

    ``stream_order`` is "manifest" (dataset order) or "shuffled:<seed>".
    Emits one CSV row per image: id, entropy before/after the update step,
    and per-class IoU of the recorded prediction.
    """
    run_dir = Path(run_dir)
    ckpt = Path(ckpt) if ckpt else _require(run_dir / "meta.ckpt", "meta checkpoint",
                                            "metadapt train-meta")
    manifest, G, _, H = load_bundle(ckpt)
    if H is None:
        raise StageError("online evaluation needs a checkpoint with a hypernetwork")
    bundle = synthdata.load_dataset(
        _require(run_dir / "data", "dataset", "metadapt gen-data"), with_sealed=True
    )
    _, extractor, centroids = load_cluster_artifact(run_dir / "centroids.ckpt")

    eta = cfg.online_lr if cfg.online_lr is not None else final_training_lr(cfg, "meta")
    report = {"online": online, "eta": eta, "stream_order": stream_order, "open": {}}
    for name, split in bundle.open_sets.items():
        if stream_order == "manifest":
            order = np.arange(len(split.images))
        elif stream_order.startswith("shuffled:"):
            shuffle_seed = int(stream_order.split(":", 1)[1])
            order = np.random.default_rng(shuffle_seed).permutation(len(split.images))
        else:
            raise StageError(f"bad stream order {stream_order!r}")
        hashes_before = G.bank_hashes()
        preds, rows = online_update(
            G, H, extractor, centroids, split.images, cfg, eta, online=online, order=order
        )
        assert G.bank_hashes() == hashes_before, "normalization banks must not change"
        labels = bundle.eval_only[f"open:{name}"].labels[order]
        conf = confusion_matrix(preds, labels, cfg.num_classes)
        per_class, mean = miou(conf)
        for pos, row in enumerate(rows):
            c = confusion_matrix(preds[pos], labels[pos], cfg.num_classes)
            row_iou, _ = miou(c)
            for cls, iou in enumerate(row_iou):
                row[f"iou_class{cls}"] = "" if iou is None else iou
        suffix = "on" if online else "off"
        write_csv(run_dir / f"online_{name}_{suffix}.csv", rows)
        report["open"][name] = {
            "miou": mean,
            "per_class_iou": per_class,
            "entropy_drop_fraction": float(
                np.mean([r["entropy_after"] <= r["entropy_before"] for r in rows])
            ),
        }
    out = run_dir / f"eval_online_{'on' if online else 'off'}.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def run_protocol(cfg: ExperimentConfig, run_dir) -> dict:
    """The full staged protocol: data, clustering, split training, meta-trained
    fusion, then evaluation.  Every stage reads only its predecessor's files."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    run_gen_data(cfg, run_dir)
    run_cluster(cfg, run_dir)
    run_train_split(cfg, run_dir)
    run_train_meta(cfg, run_dir)
    report = run_eval(cfg, run_dir, ckpt=run_dir / "meta.ckpt")
    return report


def compare_runs(run_dirs: list) -> list:
    """Summary rows (one per eval report found), ordered by target mIoU."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        for report_path in sorted(d.glob("eval_*.json")):
            rep = json.loads(report_path.read_text())
            if "target" not in rep:
                continue
            open_mious = {f"open_{k}": v["miou"] for k, v in rep.get("open", {}).items()}
            rows.append(
                {
                    "run": d.name,
                    "report": report_path.name,
                    "stage": rep.get("stage", "?"),
                    "fusion": rep.get("fusion", ""),
                    "target_miou": rep["target"]["miou"],
                    **open_mious,
                }
            )
    rows.sort(key=lambda r: r["target_miou"], reverse=True)
    return rows


def format_compare_table(rows: list) -> str:
    if not rows:
        return "(no eval reports found)"
    cols = list(rows[0])
    widths = {c: max(len(c), max(len(_fmt(r.get(c, ""))) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    for r in rows:
        lines.append("  ".join(_fmt(r.get(c, "")).ljust(widths[c]) for c in cols))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
