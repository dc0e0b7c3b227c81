import dataclasses
import json

import numpy as np
import pytest
import torch

import oracles
from coarse3d.config import TrainConfig
from coarse3d.losses import focal_loss, lovasz_softmax
from coarse3d.pointcloud_io import UNLABELLED
from coarse3d.training import (
    CKPT_MAGIC,
    CheckpointError,
    augment_batch,
    build_datasets,
    evaluate,
    init_state,
    iou_report,
    load_checkpoint,
    pseudo_labels,
    read_metrics,
    run_experiment,
    train_epoch,
    train_step,
)

TINY = TrainConfig(
    scenes=6,
    val_fraction=1 / 3,
    beams=16,
    columns=128,
    proj_height=16,
    proj_width=64,
    widths=(4, 8, 16),
    embed_dim=16,
    n_prototypes=3,
    epochs=3,
    warmup_epochs=1,
    batch_size=2,
    annotation_ratio=0.01,
)


@pytest.fixture(scope="module")
def tiny_scenes():
    from coarse3d.training import load_scenes

    return load_scenes(TINY)


# -- pseudo labels and IoU --------------------------------------------------


def test_pseudo_labels_rules():
    # (K=3, H=1, W=3); pixel columns are (5, 0, 0), (1, 3, 3), (2, 7, 7)
    logits = torch.tensor([[[5.0, 1.0, 2.0]], [[0.0, 3.0, 7.0]], [[0.0, 3.0, 7.0]]])
    pred = pseudo_labels(logits, np.array([[True, True, False]]))
    # pixel 0 one-hot -> 0; pixel 1 exact tie between classes 1 and 2 -> 1; pixel 2 invalid
    assert pred.tolist() == [[0, 1, UNLABELLED]]


def test_iou_hand_example():
    # class 0: TP=50, FP=25, FN=25 -> 50 / 100
    conf = np.array([[50, 25], [25, 0]])
    rep = iou_report(conf)
    assert rep.iou[0] == pytest.approx(0.5)
    assert rep.iou[1] == 0.0
    assert rep.miou == pytest.approx(0.25)


def test_iou_matches_pairwise_oracle(rng):
    from coarse3d import kernels

    gt = rng.integers(0, 4, 500)
    gt[gt == 3] = 2  # class 3 absent from ground truth
    pred = rng.integers(0, 4, 500)
    rep = iou_report(kernels.confusion(gt, pred, 4))
    ref = oracles.iou_from_pairs(gt.tolist(), pred.tolist(), 4)
    np.testing.assert_allclose(rep.iou, ref)
    assert np.isnan(rep.iou[3])
    assert rep.miou == pytest.approx(np.nanmean(ref))


def test_iou_perfect_and_disjoint():
    assert iou_report(np.diag([3, 4, 5])).miou == 1.0
    assert iou_report(np.array([[0, 3], [4, 0]])).miou == 0.0


def test_missed_points_count_as_false_negatives():
    rep = iou_report(np.array([[4, 0], [0, 4]]), missed=np.array([4, 0]))
    assert rep.iou.tolist() == [0.5, 1.0]


# -- data -------------------------------------------------------------------


def test_frames(tiny_scenes):
    train, val = build_datasets(TINY, tiny_scenes)
    assert (len(train), len(val)) == (4, 2)
    for f in train:
        n = len(f.cloud)
        assert f.original.n_labelled == max(1, round(0.01 * n))
        assert f.mask.n_labelled >= f.original.n_labelled
        lab = f.pix_label
        assert ((lab != UNLABELLED) <= f.image.valid).all()
        assert f.x.shape == (6, 16, 64)
    assert all(f.mask is None for f in val)


def test_full_annotation_labels_every_valid_pixel(tiny_scenes):
    cfg = dataclasses.replace(TINY, annotation_ratio=1.0)
    train, _ = build_datasets(cfg, tiny_scenes)
    state = init_state(cfg, train)
    m = train_step(state, train[:2])
    assert m["labelled"] == m["valid"]


# -- steps ------------------------------------------------------------------


def _params(state):
    return [p.detach().clone() for p in list(state.model.parameters()) + list(state.head.parameters())]


def test_warmup_isolation(tiny_scenes):
    a_cfg = dataclasses.replace(TINY, epochs=4, warmup_epochs=2, lambda_nce=0.1)
    b_cfg = dataclasses.replace(a_cfg, lambda_nce=0.7)
    train, _ = build_datasets(a_cfg, tiny_scenes)
    a, b = init_state(a_cfg, train), init_state(b_cfg, train)
    for epoch in range(2):
        a.epoch = b.epoch = epoch
        train_epoch(a, train)
        train_epoch(b, train)
        assert all(torch.equal(x, y) for x, y in zip(_params(a), _params(b)))
        assert torch.equal(a.bank.protos, b.bank.protos)
    a.epoch = b.epoch = 2
    ma, mb = train_epoch(a, train), train_epoch(b, train)
    assert ma["anchors"] > 0 and ma["nce"] > 0
    assert not all(torch.equal(x, y) for x, y in zip(_params(a), _params(b)))


def test_zero_labels_leave_bank_alone(tiny_scenes):
    train, _ = build_datasets(TINY, tiny_scenes)
    state = init_state(TINY, train)
    frames = [dataclasses.replace(f, pix_label=np.full_like(f.pix_label, UNLABELLED)) for f in train[:2]]
    before = state.bank.protos.clone()
    m = train_step(state, frames)
    assert torch.equal(state.bank.protos, before)
    assert m["focal"] == 0 and m["lovasz"] == 0 and m["bank_pixels"] == 0


def test_bank_purity_audit(tiny_scenes):
    cfg = dataclasses.replace(TINY, audit_bank=True)
    train, _ = build_datasets(cfg, tiny_scenes)
    state = init_state(cfg, train)
    consumed = 0
    for epoch in range(3):
        state.epoch = epoch
        consumed += train_epoch(state, train)["bank_pixels"]
    assert state.audit
    assert sum(len(lab) for _, lab in state.audit) == consumed
    for k, lab in state.audit:
        assert (lab == k).all()


def test_augmentation_consistency():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 4, 6, 10, generator=g, dtype=torch.float64)
    labels = torch.randint(-1, 4, (3, 6, 10), generator=g).numpy()
    valid = labels >= 0
    la, ya, va = augment_batch(logits, labels, valid, seed=9)
    assert not torch.equal(la, logits)
    assert np.array_equal(va, ya >= 0)
    ya_t, y_t = torch.from_numpy(ya.copy()), torch.from_numpy(labels)
    torch.testing.assert_close(focal_loss(la, ya_t), focal_loss(logits, y_t))
    torch.testing.assert_close(
        lovasz_softmax(torch.softmax(la, 1), ya_t), lovasz_softmax(torch.softmax(logits, 1), y_t)
    )


# -- evaluation and experiments --------------------------------------------


def test_evaluate_on_own_ground_truth(tiny_scenes):
    _, val = build_datasets(TINY, tiny_scenes)

    class Oracle(torch.nn.Module):
        # logits that reproduce the retained point's label at every valid pixel
        def forward(self, x):
            out = torch.full((x.shape[0], TINY.n_classes, *x.shape[-2:]), -10.0)
            for b in range(x.shape[0]):
                fr = val[self.start + b]
                lab = np.where(fr.image.valid, fr.dense[np.maximum(fr.image.point_index, 0)], 0)
                out[b].scatter_(0, torch.from_numpy(lab)[None], 10.0)
            return out, []

    model = Oracle()
    model.start = 0
    cfg = dataclasses.replace(TINY, batch_size=len(val))
    rep = evaluate(model, val, cfg)
    # occluded points inherit their pixel's label, so the score is high but not necessarily perfect
    assert rep.miou > 0.8
    assert rep.confusion.sum() + rep.missed.sum() == sum(len(f.dense) for f in val)


def test_run_experiment_artifacts_and_determinism(tmp_path, tiny_scenes):
    r1 = run_experiment(TINY, out_dir=tmp_path / "a", scenes=tiny_scenes)
    run_experiment(TINY, out_dir=tmp_path / "b", scenes=tiny_scenes)
    m1 = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert m1 == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    recs = read_metrics(tmp_path / "a" / "metrics.jsonl")
    assert [r["epoch"] for r in recs if r["split"] == "val"] == [0, 1, 2]
    assert [r["lambda_nce"] for r in recs if r["split"] == "train"] == [0.0, 0.1, 0.1]
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["miou"] == pytest.approx(r1["report"].miou)
    assert (tmp_path / "a" / "config.txt").read_text() == TINY.to_text()


def test_zero_epochs_reports_initial_model(tiny_scenes):
    cfg = dataclasses.replace(TINY, epochs=0)
    out = run_experiment(cfg, scenes=tiny_scenes)
    assert [r["epoch"] for r in out["records"]] == [-1]
    assert 0 <= out["report"].miou <= 1


def test_checkpoint_roundtrip(tmp_path, tiny_scenes):
    out = run_experiment(TINY, out_dir=tmp_path, scenes=tiny_scenes)
    cfg, model, head, bank, header = load_checkpoint(tmp_path / "checkpoint.ckpt")
    assert cfg == TINY and header["epoch"] == TINY.epochs
    state = out["state"]
    for a, b in zip(state.model.state_dict().values(), model.state_dict().values()):
        assert torch.equal(a.to(b.dtype), b)
    assert torch.equal(bank.protos, state.bank.protos)
    _, val = build_datasets(cfg, tiny_scenes)
    assert evaluate(model, val, cfg).miou == out["report"].miou


def test_checkpoint_bad_magic(tmp_path, tiny_scenes):
    run_experiment(dataclasses.replace(TINY, epochs=0), out_dir=tmp_path, scenes=tiny_scenes)
    data = bytearray((tmp_path / "checkpoint.ckpt").read_bytes())
    assert bytes(data[:8]) == CKPT_MAGIC
    data[:8] = b"NOTACKPT"
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")


@pytest.mark.parametrize("strategy", ["softmax_prob", "all"])
def test_anchor_strategies_run(strategy, tiny_scenes):
    cfg = dataclasses.replace(TINY, anchor_strategy=strategy)
    out = run_experiment(cfg, scenes=tiny_scenes)
    assert out["records"][-2]["anchors"] > 0


def test_soft_assign_and_knn_eval(tiny_scenes):
    cfg = dataclasses.replace(TINY, soft_assign=True, knn_eval=True, proto_init="random")
    out = run_experiment(cfg, scenes=tiny_scenes)
    assert np.isfinite(out["report"].miou)
