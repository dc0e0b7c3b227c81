"""Training loop, evaluation, checkpoints and metric logs."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import anchor_sampler as anchors_mod
from . import kernels
from .config import TrainConfig, parse_text
from .embedding import ProjectionHead, build_backbone, image_tensor, upsample_pyramid
from .losses import LossWeights, focal_loss, info_nce_pix2proto, lovasz_softmax, total_loss
from .pointcloud_io import (
    UNLABELLED,
    PointCloud,
    ProjectionConfig,
    RangeImage,
    backproject,
    knn_postprocess,
    load_labels,
    load_remap,
    load_scan,
    pixel_labels,
    spherical_project,
)
from .prototype_bank import PrototypeBank, cost_matrix, map_pixels, sinkhorn_assign, update_prototypes
from .synthetic import SceneSpec, generate_scene, scene_spec
from .weak_supervision import (
    LabelMask,
    class_frequencies,
    focal_weights,
    merge_stats,
    propagate_voxel_labels,
    subsample_labels,
)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"C3DCKPT1"
METRICS_MAGIC = "# coarse3d-metrics v1"

# purposes for derived random streams
_AUG, _GUMBEL, _ANCHOR, _SUBSAMPLE, _VOXEL, _SHUFFLE = range(6)


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Frame:
    cloud: PointCloud
    dense: np.ndarray  # (N,) ground truth
    image: RangeImage
    mask: LabelMask | None = None  # training labels after propagation
    original: LabelMask | None = None  # training labels before propagation
    pix_label: np.ndarray | None = None  # (H, W) from ``mask``
    x: torch.Tensor | None = None  # (6, H, W) network input


def projection_config(cfg: TrainConfig) -> ProjectionConfig:
    return ProjectionConfig(cfg.proj_height, cfg.proj_width, cfg.fov_up, cfg.fov_down)


def scene_base(cfg: TrainConfig) -> SceneSpec:
    return SceneSpec(
        seed=cfg.data_seed,
        n_classes=cfg.n_classes,
        points_per_class=tuple(int(v) for v in cfg.points_per_class),
        ground_extent=cfg.ground_extent,
        object_count=tuple(int(v) for v in cfg.object_count),
        object_size=tuple(float(v) for v in cfg.object_size),
        noise_sigma=cfg.noise_sigma,
        intensity_sigma=cfg.intensity_sigma,
        beams=cfg.beams,
        columns=cfg.columns,
        fov_up=cfg.fov_up,
        fov_down=cfg.fov_down,
    )


def _load_disk_scenes(cfg: TrainConfig):
    with open(os.path.join(cfg.data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    remap = None
    if manifest.get("remap"):
        remap = load_remap(os.path.join(cfg.data_dir, manifest["remap"]))
    scenes = []
    for entry in manifest["files"]:
        cloud = load_scan(os.path.join(cfg.data_dir, entry["scan"]))
        labels = load_labels(os.path.join(cfg.data_dir, entry["label"]), len(cloud), remap)
        scenes.append((cloud, labels))
    return scenes


def load_scenes(cfg: TrainConfig):
    """``(cloud, dense labels)`` pairs from ``data_dir`` or the synthetic generator."""
    if cfg.data_dir:
        return _load_disk_scenes(cfg)
    base = scene_base(cfg)
    base.validate(max_classes=cfg.n_classes)
    return [generate_scene(scene_spec(base, i)) for i in range(cfg.scenes)]


def split_scenes(scenes, val_fraction):
    n_val = int(round(len(scenes) * val_fraction))
    n_train = len(scenes) - n_val
    return scenes[:n_train], scenes[n_train:]


def make_frames(scenes, cfg: TrainConfig, train: bool) -> list[Frame]:
    pcfg = projection_config(cfg)
    frames = []
    for i, (cloud, dense) in enumerate(scenes):
        image = spherical_project(cloud, pcfg)
        fr = Frame(cloud=cloud, dense=np.asarray(dense, dtype=np.int64), image=image, x=image_tensor(image))
        if train:
            orig = subsample_labels(dense, cfg.annotation_ratio, derive_seed(cfg.seed, i, _SUBSAMPLE))
            mask = orig
            if cfg.propagate:
                mask = propagate_voxel_labels(cloud, orig, cfg.voxel_size, derive_seed(cfg.seed, i, _VOXEL))
            fr.original, fr.mask = orig, mask
            fr.pix_label = pixel_labels(image, mask.labels, cloud)
        frames.append(fr)
    return frames


def build_datasets(cfg: TrainConfig, scenes=None):
    scenes = load_scenes(cfg) if scenes is None else scenes
    train, val = split_scenes(scenes, cfg.val_fraction)
    return make_frames(train, cfg, train=True), make_frames(val, cfg, train=False)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainConfig
    model: torch.nn.Module
    head: ProjectionHead
    bank: PrototypeBank
    optimizer: torch.optim.Optimizer
    class_weights: torch.Tensor
    epoch: int = 0
    step: int = 0
    audit: list = field(default_factory=list)


def build_model(cfg: TrainConfig):
    torch.manual_seed(derive_seed(cfg.seed, 0xB0DE))
    model = build_backbone(cfg.backbone, cfg.n_classes, widths=tuple(int(w) for w in cfg.widths))
    head = ProjectionHead(
        sum(model.pyramid_channels),
        dim=cfg.embed_dim,
        negative_slope=cfg.head_slope,
        bias=cfg.head_bias,
        norm=cfg.head_norm,
    )
    return model, head


def init_state(cfg: TrainConfig, train_frames: list[Frame]) -> TrainState:
    model, head = build_model(cfg)
    bank = PrototypeBank.create(
        cfg.n_classes,
        n_p=cfg.n_prototypes,
        dim=cfg.embed_dim,
        sigma=cfg.momentum,
        seed=derive_seed(cfg.seed, 0xBA4C),
        init=cfg.proto_init,
    )
    opt = torch.optim.AdamW(
        list(model.parameters()) + list(head.parameters()),
        lr=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
    )
    stats = [class_frequencies(f.original, cfg.n_classes) for f in train_frames if f.original.n_labelled]
    if stats:
        w = focal_weights(merge_stats(stats), cfg.focal_eps)
    else:
        w = np.ones(cfg.n_classes)
    return TrainState(cfg, model, head, bank, opt, torch.tensor(w, dtype=torch.float32))


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def pseudo_labels(logits: torch.Tensor, valid) -> np.ndarray:
    """Argmax class per valid pixel (first class on ties), UNLABELLED elsewhere.

    ``logits`` is ``(K, H, W)`` or ``(B, K, H, W)``.
    """
    pred = torch.argmax(logits.detach(), dim=-3).cpu().numpy().astype(np.int64)
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, pred, UNLABELLED)


def augment_batch(x: torch.Tensor, labels: np.ndarray, valid: np.ndarray, seed: int):
    """Random horizontal flip and circular column shift, applied identically to inputs and labels."""
    rng = np.random.default_rng(seed)
    x = x.clone()
    labels = labels.copy()
    valid = valid.copy()
    W = x.shape[-1]
    for b in range(x.shape[0]):
        flip = bool(rng.integers(2))
        shift = int(rng.integers(W))
        xb, lb, vb = x[b], labels[b], valid[b]
        if flip:
            xb, lb, vb = torch.flip(xb, dims=[-1]), lb[:, ::-1], vb[:, ::-1]
        x[b] = torch.roll(xb, shifts=shift, dims=-1)
        labels[b] = np.roll(lb, shift, axis=-1)
        valid[b] = np.roll(vb, shift, axis=-1)
    return x, labels, valid


def _anchor_tables(probs: np.ndarray, pred: np.ndarray, valid: np.ndarray, strategy: str, n_classes: int):
    """probs is (K, H, W) for one frame."""
    chw = np.moveaxis(probs, 0, -1)
    if strategy == "softmax_prob":
        return anchors_mod.sampling_probabilities(
            np.zeros(pred.shape), pred, valid, n_classes, score=chw.max(axis=-1)
        )
    ent = anchors_mod.shannon_entropy(chw / chw.sum(axis=-1, keepdims=True))
    return anchors_mod.sampling_probabilities(ent, pred, valid, n_classes)


def update_bank(state: TrainState, feats: torch.Tensor, labels: np.ndarray, seed_keys) -> int:
    """Cluster the labelled-pixel embeddings of each class into its prototypes.

    Only pixels carrying a (propagated) ground-truth label are used. Returns
    the number of pixels consumed.
    """
    cfg = state.cfg
    b, r, c = np.nonzero(labels != UNLABELLED)
    if b.size == 0:
        return 0
    cls = labels[b, r, c]
    with torch.no_grad():
        emb = state.head(feats[torch.from_numpy(b), :, torch.from_numpy(r), torch.from_numpy(c)].detach())
    emb = emb.to(state.bank.protos.dtype)
    for k in np.unique(cls):
        sel = torch.from_numpy(np.flatnonzero(cls == k))
        e = emb[sel]
        if cfg.audit_bank:
            state.audit.append((int(k), labels[b[sel.numpy()], r[sel.numpy()], c[sel.numpy()]].copy()))
        plan = sinkhorn_assign(cost_matrix(e, state.bank.protos[k]), cfg.sinkhorn_iters, cfg.sinkhorn_epsilon)
        if cfg.soft_assign:
            update_prototypes(state.bank, int(k), e, None, weights=plan * plan.shape[0])
        else:
            idx = map_pixels(plan, cfg.gumbel_tau, derive_seed(*seed_keys, _GUMBEL, int(k)))
            update_prototypes(state.bank, int(k), e, idx)
    return int(b.size)


def train_step(state: TrainState, frames: list[Frame], batch_index: int = 0) -> dict:
    """One optimisation step on a batch of frames. Returns step metrics."""
    cfg = state.cfg
    epoch = state.epoch
    keys = (cfg.seed, epoch, batch_index)
    x = torch.stack([f.x for f in frames])
    labels = np.stack([f.pix_label for f in frames])
    valid = np.stack([f.image.valid for f in frames])
    if cfg.augment:
        x, labels, valid = augment_batch(x, labels, valid, derive_seed(*keys, _AUG))

    state.model.train()
    state.head.train()
    logits, pyramid = state.model(x)
    feats = upsample_pyramid(pyramid, logits.shape[-2:])

    n_bank = update_bank(state, feats, labels, keys)

    contrastive = epoch >= cfg.warmup_epochs and cfg.lambda_nce != 0
    nce = logits.new_zeros(())
    n_anchor = 0
    if contrastive:
        probs = torch.softmax(logits.detach(), dim=1).to(torch.float64).numpy()
        pred = pseudo_labels(logits, valid)
        ab, ar, ac, acls = [], [], [], []
        for i in range(len(frames)):
            if cfg.anchor_strategy == "all":
                rr, cc = np.nonzero(pred[i] != UNLABELLED)
                sel = anchors_mod.AnchorSet(np.stack([rr, cc], 1), pred[i][rr, cc], epoch)
            else:
                tables = _anchor_tables(probs[i], pred[i], valid[i], cfg.anchor_strategy, cfg.n_classes)
                budget = anchors_mod.anchor_budget(
                    epoch, cfg.warmup_epochs, cfg.epochs, int((pred[i] != UNLABELLED).sum())
                )
                sel = anchors_mod.sample_anchors(tables, budget, derive_seed(*keys, _ANCHOR, i), epoch)
            ab.append(np.full(len(sel), i))
            ar.append(sel.pixels[:, 0])
            ac.append(sel.pixels[:, 1])
            acls.append(sel.classes)
        ab, ar, ac, acls = (np.concatenate(a).astype(np.int64) for a in (ab, ar, ac, acls))
        usable = state.bank.initialized.numpy()[acls]
        ab, ar, ac, acls = ab[usable], ar[usable], ac[usable], acls[usable]
        n_anchor = int(ab.size)
        if n_anchor:
            emb = state.head(feats[torch.from_numpy(ab), :, torch.from_numpy(ar), torch.from_numpy(ac)])
            nce = info_nce_pix2proto(emb, torch.from_numpy(acls), state.bank, cfg.temperature)

    y = torch.from_numpy(labels)
    foc = focal_loss(logits, y, state.class_weights.to(logits.dtype), cfg.gamma)
    lov = lovasz_softmax(torch.softmax(logits, dim=1), y)
    w = LossWeights(cfg.lambda_foc, cfg.lambda_lov, cfg.lambda_nce if contrastive else 0.0, cfg.temperature, cfg.gamma)
    loss = total_loss(foc, lov, nce, w) if contrastive else w.lambda_foc * foc + w.lambda_lov * lov
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss at epoch {epoch} batch {batch_index}: "
            f"focal={foc.item()} lovasz={lov.item()} nce={nce.item()} "
            f"labelled={int((labels != UNLABELLED).sum())} anchors={n_anchor}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
        state.optimizer.step()
    state.step += 1
    return {
        "focal": foc.item(),
        "lovasz": lov.item(),
        "nce": nce.item(),
        "total": loss.item(),
        "labelled": int((labels != UNLABELLED).sum()),
        "valid": int(valid.sum()),
        "bank_pixels": n_bank,
        "anchors": n_anchor,
    }


def train_epoch(state: TrainState, frames: list[Frame]) -> dict:
    cfg = state.cfg
    order = np.random.default_rng(derive_seed(cfg.seed, state.epoch, _SHUFFLE)).permutation(len(frames))
    totals: dict = {}
    n = 0
    for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
        batch = [frames[i] for i in order[start : start + cfg.batch_size]]
        m = train_step(state, batch, bi)
        for k, v in m.items():
            totals[k] = totals.get(k, 0) + v
        n += 1
    out = {k: (v / n if k in ("focal", "lovasz", "nce", "total") else v) for k, v in totals.items()}
    out["steps"] = n
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    iou: np.ndarray  # (K,), NaN for classes absent from ground truth
    miou: float
    confusion: np.ndarray  # (K, K) rows = ground truth
    missed: np.ndarray  # (K,) points left without a prediction (outside the fov)

    def to_dict(self):
        return {
            "miou": self.miou,
            "iou": [None if math.isnan(v) else float(v) for v in self.iou],
            "confusion": self.confusion.tolist(),
            "missed": self.missed.tolist(),
        }


def iou_report(confusion: np.ndarray, missed: np.ndarray | None = None) -> EvalReport:
    """IoU_k = TP / (TP + FP + FN), averaged over classes present in ground truth."""
    confusion = np.asarray(confusion, dtype=np.int64)
    K = confusion.shape[0]
    missed = np.zeros(K, dtype=np.int64) if missed is None else np.asarray(missed, dtype=np.int64)
    tp = np.diag(confusion).astype(np.float64)
    gt = confusion.sum(axis=1) + missed
    fp = confusion.sum(axis=0) - tp
    fn = gt - tp
    present = gt > 0
    iou = np.full(K, np.nan)
    iou[present] = tp[present] / (tp + fp + fn)[present]
    miou = float(np.mean(iou[present])) if present.any() else float("nan")
    return EvalReport(iou=iou, miou=miou, confusion=confusion, missed=missed)


def point_predictions(model, frame: Frame, cfg: TrainConfig, logits=None) -> np.ndarray:
    if logits is None:
        model.eval()
        with torch.no_grad():
            logits, _ = model(frame.x[None])
    pred = pseudo_labels(logits[0], frame.image.valid)
    pts = backproject(pred, frame.image, frame.cloud)
    if cfg.knn_eval:
        pts = knn_postprocess(pts, frame.cloud, frame.image, cfg.knn_k, cfg.knn_window, cfg.n_classes)
    return pts


def evaluate(model, frames: list[Frame], cfg: TrainConfig) -> EvalReport:
    """Point-level confusion over all frames after back-projection."""
    if not frames:
        raise ValueError("evaluation needs at least one frame")
    K = cfg.n_classes
    conf = np.zeros((K, K), dtype=np.int64)
    missed = np.zeros(K, dtype=np.int64)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(frames), cfg.batch_size):
            chunk = frames[start : start + cfg.batch_size]
            logits, _ = model(torch.stack([f.x for f in chunk]))
            for i, fr in enumerate(chunk):
                pts = point_predictions(model, fr, cfg, logits[i : i + 1])
                conf += kernels.confusion(fr.dense, pts, K)
                gone = (pts == UNLABELLED) & (fr.dense >= 0) & (fr.dense < K)
                missed += np.bincount(fr.dense[gone], minlength=K)[:K]
    return iou_report(conf, missed)


# ---------------------------------------------------------------------------
# checkpoints and logs
# ---------------------------------------------------------------------------


def save_checkpoint(path, state: TrainState) -> None:
    """Magic, little-endian u64 header length, JSON header, raw tensors, bank blob."""
    tensors = []
    payload = []
    offset = 0
    for prefix, module in (("model.", state.model), ("head.", state.head)):
        for name, t in module.state_dict().items():
            arr = t.detach().cpu().numpy()
            arr = arr.astype("<i8") if arr.dtype.kind in "iu" else arr.astype("<f4")
            blob = arr.tobytes()
            tensors.append({"name": prefix + name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset})
            payload.append(blob)
            offset += len(blob)
    bank = state.bank.to_bytes()
    header = {
        "format": "coarse3d-checkpoint",
        "version": 1,
        "epoch": state.epoch,
        "step": state.step,
        "config": state.cfg.to_text(),
        "class_weights": state.class_weights.tolist(),
        "tensors": tensors,
        "bank_offset": offset,
        "bank_bytes": len(bank),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for blob in payload:
            fh.write(blob)
        fh.write(bank)


def load_checkpoint(path):
    """Returns ``(cfg, model, head, bank, header)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a coarse3d checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", data, len(CKPT_MAGIC))
    start = len(CKPT_MAGIC) + 8
    try:
        header = json.loads(data[start : start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = start + hlen
    cfg = TrainConfig(**parse_text(header["config"])).validate()
    model, head = build_model(cfg)
    states = {"model.": {}, "head.": {}}
    for t in header["tensors"]:
        arr = np.frombuffer(data, dtype=t["dtype"], count=int(np.prod(t["shape"], dtype=np.int64)), offset=body + t["offset"])
        prefix = "model." if t["name"].startswith("model.") else "head."
        states[prefix][t["name"][len(prefix) :]] = torch.from_numpy(arr.reshape(t["shape"]).copy())
    model.load_state_dict(states["model."])
    head.load_state_dict(states["head."])
    bo = body + header["bank_offset"]
    bank = PrototypeBank.from_bytes(data[bo : bo + header["bank_bytes"]])
    return cfg, model, head, bank, header


def metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=True)


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != METRICS_MAGIC:
            raise ValueError(f"{path}: not a coarse3d metrics file")
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def run_experiment(cfg: TrainConfig, out_dir=None, scenes=None) -> dict:
    """Train, evaluate every ``eval_every`` epochs, write artifacts.

    Files in ``out_dir``: ``config.txt`` (effective config), ``metrics.jsonl``,
    ``report.json`` and ``checkpoint.ckpt``. Returns a summary dict with the
    metric records and the final report.
    """
    cfg.validate()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if not os.access(out_dir, os.W_OK):
            raise PermissionError(f"output directory not writable: {out_dir}")
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(cfg.to_text())
    train_frames, val_frames = build_datasets(cfg, scenes)
    eval_frames = val_frames or train_frames
    state = init_state(cfg, train_frames)
    records = []
    fh = None
    if out_dir is not None:
        fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        fh.write(METRICS_MAGIC + "\n")

    def emit(rec):
        records.append(rec)
        if fh is not None:
            fh.write(metrics_line(rec) + "\n")
            fh.flush()

    report = None
    try:
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            m = train_epoch(state, train_frames)
            active = epoch >= cfg.warmup_epochs
            emit(
                {
                    "epoch": epoch,
                    "split": "train",
                    "focal": m["focal"],
                    "lovasz": m["lovasz"],
                    "nce": m["nce"],
                    "total": m["total"],
                    "lambda_nce": cfg.lambda_nce if active else 0.0,
                    "labelled": m["labelled"],
                    "valid": m["valid"],
                    "anchors": m["anchors"],
                }
            )
            if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
                report = evaluate(state.model, eval_frames, cfg)
                emit({"epoch": epoch, "split": "val", "miou": report.miou})
                log.info("epoch %d  loss %.4f  val mIoU %.4f", epoch, m["total"], report.miou)
        state.epoch = cfg.epochs
        if report is None:
            report = evaluate(state.model, eval_frames, cfg)
            emit({"epoch": -1, "split": "val", "miou": report.miou})
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        with open(os.path.join(out_dir, "report.json"), "w") as out:
            json.dump(report.to_dict(), out, indent=2, sort_keys=True)
            out.write("\n")
        save_checkpoint(os.path.join(out_dir, "checkpoint.ckpt"), state)
    return {"records": records, "report": report, "state": state}

