import math

import numpy as np
import pytest

import protomatch as pm


def square_mask(width, height, x, y, w, h):
    a = np.zeros((height, width), dtype=np.uint8)
    a[y : y + h, x : x + w] = 1
    return pm.BinaryMask.from_array(a)


def test_rle_roundtrip_and_bbox():
    m = square_mask(20, 10, 3, 2, 5, 4)
    assert m.area == 20
    assert pm.mask_to_bbox(m) == pm.BoundingBox(3, 2, 5, 4)
    assert np.array_equal(m.to_array(), square_mask(20, 10, 3, 2, 5, 4).to_array())


def test_box_iou_and_nms():
    a = pm.BoundingBox(0, 0, 10, 10)
    b = pm.BoundingBox(5, 0, 10, 10)
    assert pm.box_iou(a, b) == pytest.approx(50 / 150)
    assert pm.nms([a, b, a], [0.9, 0.8, 0.95], 0.5) == [2, 1]


def test_worked_score_example():
    b = pm.score_row([0.8, 0.2, 0.2])
    p = math.exp(0.6) / (math.exp(0.6) + 2)
    assert b.predicted == 0
    assert b.p_max == pytest.approx(p, abs=1e-15)
    assert b.s_filter == pytest.approx(0.8 + p, abs=1e-15)
    assert b.s_mc == pytest.approx(0.4, abs=1e-15)
    assert b.s_final == b.s_filter + b.s_mc


def test_store_roundtrip_and_errors(tmp_path):
    store = pm.PrototypeStore("smoke")
    store.add(3, [[1.0, 0.0], [0.0, 2.0]])
    store.add(1, [[0.0, 1.0]])
    assert [p.class_id for p in store.prototypes] == [1, 3]
    assert pm.l2_norm(store.at(3).vector) <= 1.0
    path = tmp_path / "s.dpmp"
    store.save(path)
    assert pm.PrototypeStore.load(path) == store
    assert pm.PrototypeStore.from_bytes(store.to_bytes()) == store

    with pytest.raises(pm.Error) as err:
        store.add(1, [[1.0, 0.0]])
    assert err.value.code == "DuplicateClass"
    assert pm.exit_code(err.value.code) == 6

    with pytest.raises(pm.Error) as err:
        pm.build_prototype(9, [[0.0, 0.0]])
    assert err.value.code == "ZeroVector"


def test_detect_and_evaluate():
    store = pm.PrototypeStore()
    store.add(1, [[1.0, 0.0, 0.0]])
    store.add(2, [[0.0, 1.0, 0.0]])
    batch = pm.ProposalBatch(1, 0, 100, 100)
    batch.add(pm.MaskProposal(square_mask(100, 100, 10, 10, 20, 20), 0.9, 0.95), [1.0, 0.05, 0.0])
    batch.add(pm.MaskProposal(square_mask(100, 100, 60, 60, 20, 20), 0.9, 0.95), [0.0, 1.0, 0.1])
    run = pm.detect(batch, store)
    assert sorted(d.class_id for d in run.detections) == [1, 2]

    gt = pm.GroundTruthSet(
        [1, 2],
        [pm.ImageInfo(1, 0, 100, 100)],
        [
            pm.GroundTruthAnnotation(1, 0, 1, pm.BoundingBox(10, 10, 20, 20)),
            pm.GroundTruthAnnotation(1, 0, 2, pm.BoundingBox(60, 60, 20, 20)),
        ],
    )
    report = pm.evaluate(pm.flatten(pm.detect_all([batch], store)), gt)
    assert report.mean_ap == 1.0
    assert report.per_class_ap == {1: 1.0, 2: 1.0}
    assert pm.evaluate([], gt).mean_ap == 0.0


def test_config_defaults(tmp_path):
    cfg = pm.PipelineConfig()
    assert (cfg.tau, cfg.theta_nms, cfg.classwise_nms_iou) == (0.4, 0.75, 0.5)
    path = tmp_path / "run.toml"
    pm.write_config(cfg, path)
    assert pm.read_config(path) == cfg
    cfg.tau = 1.5
    with pytest.raises(pm.Error):
        cfg.validate()
