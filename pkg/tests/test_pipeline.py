import numpy as np
import pytest

import meshflow.autodiff as ad
from meshflow import pipeline, synthdata
from meshflow.autodiff import Tensor
from meshflow.graphdef import DeformationModel, ModelConfig, TemplateContext
from meshflow.pipeline import (AdamW, TrainConfig, cyclic_lr, infer,
                               init_model, train)
from oracles import adamw_scalar_step

TINY_MODEL = ModelConfig(unet_channels=(2, 3, 4, 3, 2), n_seg_outputs=2,
                         n_node_blocks=2, euler_steps=2, hidden=8)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    synthdata.generate_dataset(out, 3, 1, 1, grid=16, seed=0,
                               spec_overrides={"subdivisions": 2,
                                               "spacing": 4.0})
    return out


def tiny_config(data_dir, out_dir, **kw):
    cfg = TrainConfig(data_dir=str(data_dir), out_dir=str(out_dir),
                      epochs=1, n_sample=200, val_n_sample=500,
                      seed=0, model=TINY_MODEL)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


# ---------------------------------------------------------------------------
# schedule and optimizer


def test_cyclic_lr_endpoints():
    assert cyclic_lr(0, 1e-4, 1e-3, 10) == pytest.approx(1e-4)
    assert cyclic_lr(5, 1e-4, 1e-3, 10) == pytest.approx(1e-3)
    for step in range(25):
        assert cyclic_lr(step, 1e-4, 1e-3, 10) == \
            pytest.approx(cyclic_lr(step + 10, 1e-4, 1e-3, 10))


def test_adamw_zero_grad_zero_decay_is_noop():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adamw_matches_scalar_oracle():
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.004
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p], lr=lr, betas=(b1, b2), weight_decay=wd, eps=eps)
    x, m, v = 1.0, 0.0, 0.0
    for t in range(1, 6):
        g = 2.0 * x          # gradient of x^2 at the oracle's x
        p.grad = np.array([2.0 * p.data[0]])
        opt.step()
        x, m, v = adamw_scalar_step(x, g, m, v, t, lr, b1, b2, eps, wd)
        assert p.data[0] == pytest.approx(x, rel=1e-12), t
    assert p.data[0] < 1.0   # descending on x^2


def test_adamw_decay_only():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.001), rel=1e-12)


def test_adamw_skips_nonfinite():
    p = Tensor(np.array([1.0]), requires_grad=True)
    q = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p, q], lr=0.1)
    p.grad = np.array([np.nan])
    q.grad = np.array([1.0])
    opt.step()
    assert opt.skipped == 1
    assert p.data[0] == 1.0
    assert q.data[0] != 1.0


# ---------------------------------------------------------------------------
# init


def test_paper_preset_constants():
    cfg = pipeline.paper_preset(TrainConfig())
    assert cfg.model.unet_channels == (16, 32, 64, 128, 256, 64, 32, 16, 8)
    assert cfg.model.n_classes == 3
    assert cfg.model.n_seg_outputs == 3
    assert cfg.model.n_node_blocks == 2
    assert cfg.model.euler_steps == 5
    assert cfg.model.hidden == 64
    assert cfg.n_sample == 50_000
    assert cfg.lr_cnn == 1e-4 and cfg.lr_gnn == 5e-5
    assert cfg.lambda_edge == 1.0 and cfg.lambda_nc == 0.0001
    assert cfg.k_max == 5.0
    assert cfg.epochs == 105
    assert cfg.beta1 == 0.9 and cfg.beta2 == 0.999
    assert cfg.model.pad_shape == (192, 208, 192)
    # tap arithmetic at full scale: 9 internal maps + input + seg
    assert len(cfg.model.unet_config().tap_names()) == 11


def test_prepare_scene_padding(tiny_corpus):
    loaded = synthdata.load_scene(tiny_corpus / "scene_0000")
    ts = pipeline.prepare_scene(loaded, 5.0, 1.0, pad_shape=(24, 24, 24))
    assert ts.intensity.data.shape[1:] == (24, 24, 24)
    assert ts.labels.shape == (24, 24, 24)
    # content centered, border is background
    assert (ts.labels[:4] == 0).all() and (ts.labels[-4:] == 0).all()
    np.testing.assert_array_equal(ts.labels[4:20, 4:20, 4:20],
                                  loaded.labels)
    # world frame preserved
    np.testing.assert_allclose(ts.intensity.index_to_world([4, 4, 4]),
                               loaded.intensity.index_to_world([0, 0, 0]))


def test_init_model_identity_and_determinism():
    cfg = tiny_config(".", ".")
    m1 = init_model(cfg)
    m2 = init_model(cfg)
    for (n1, t1), (n2, t2) in zip(m1.named_params(), m2.named_params()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)
    for blk in m1.blocks:
        assert (blk.head.W0.data == 0).all()
        assert (blk.head.W1.data == 0).all()
        assert (blk.head.b.data == 0).all()


def test_init_graph_weight_statistics():
    cfg = tiny_config(".", ".")
    cfg.model = ModelConfig()   # desk size, enough entries
    model = init_model(cfg)
    samples = []
    for name, t in model.named_params():
        if name.startswith(("embed", "node")) and ".head." not in name \
                and (".W0" in name or ".W1" in name):
            samples.append(t.data.reshape(-1))
    w = np.concatenate(samples)
    assert len(w) >= 10_000
    assert abs(w.mean()) < 0.001
    assert w.std() == pytest.approx(0.01, rel=0.05)


def test_two_groups_receive_configured_lrs():
    cfg = tiny_config(".", ".")
    model = init_model(cfg)
    opt_cnn = AdamW(model.feature_params(), lr=0.5)
    opt_gnn = AdamW(model.graph_params(), lr=0.001)
    pc = opt_cnn.params[0]
    pg = opt_gnn.params[0]
    before_c = pc.data.copy()
    before_g = pg.data.copy()
    pc.grad = np.ones_like(pc.data)
    pg.grad = np.ones_like(pg.data)
    opt_cnn.step()
    opt_gnn.step()
    # first Adam step moves each weight by exactly lr (bias-corrected)
    np.testing.assert_allclose(np.abs(pc.data - before_c), 0.5, rtol=1e-5)
    np.testing.assert_allclose(np.abs(pg.data - before_g), 0.001, rtol=1e-5)


# ---------------------------------------------------------------------------
# train / infer


def test_train_writes_artifacts_and_log(tiny_corpus, tmp_path):
    cfg = tiny_config(tiny_corpus, tmp_path / "run")
    result = train(cfg)
    assert (tmp_path / "run" / "best.ckpt").exists()
    assert (tmp_path / "run" / "last.ckpt").exists()
    log = (tmp_path / "run" / "training_log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_loss,vox_loss,mesh_loss,val_assd," \
                     "lr_cnn,lr_gnn"
    assert len(log) == 2
    assert np.isfinite(result.best_val_assd)


def test_zero_lr_run_keeps_parameters(tiny_corpus, tmp_path):
    cfg = tiny_config(tiny_corpus, tmp_path / "zero", lr_cnn=0.0,
                      lr_gnn=0.0, max_lr_factor=1.0, weight_decay=0.0)
    before = {n: t.data.copy() for n, t in init_model(cfg).named_params()}
    train(cfg)
    loaded, _ = ad.load_checkpoint(tmp_path / "zero" / "last.ckpt")
    for name, val in before.items():
        np.testing.assert_array_equal(loaded[name],
                                      val.astype(np.float32), err_msg=name)


def test_train_deterministic_loss_curve(tiny_corpus, tmp_path):
    rows = []
    for run in range(2):
        cfg = tiny_config(tiny_corpus, tmp_path / f"det{run}")
        rows.append(train(cfg).log_rows)
    assert rows[0] == rows[1]


def test_train_nan_abort(tiny_corpus, tmp_path, monkeypatch):
    cfg = tiny_config(tiny_corpus, tmp_path / "nan")

    real_init = pipeline.init_model

    def poisoned(config):
        model = real_init(config)
        model.unet.seg_head.w.data[...] = np.nan
        return model

    monkeypatch.setattr(pipeline, "init_model", poisoned)
    with pytest.raises(pipeline.TrainingAborted, match="epoch 0"):
        train(cfg)
    assert (tmp_path / "nan" / "last.ckpt").exists()


def test_infer_identity_and_label_transfer(tiny_corpus):
    cfg = tiny_config(tiny_corpus, ".")
    model = init_model(cfg)
    inner_t, outer_t = synthdata.load_template(tiny_corpus)
    ctx = TemplateContext.build([(inner_t, outer_t)])
    scene = synthdata.load_scene(tiny_corpus / "scene_0004")
    out = infer(model, scene.intensity, ctx)
    # fresh checkpoint: template passthrough
    assert np.array_equal(out.surfaces[0].vertices, inner_t.vertices)
    np.testing.assert_array_equal(out.surfaces[0].vertex_attrs["parcel"],
                                  inner_t.vertex_attrs["parcel"])
    assert out.seg_labels.shape == scene.labels.shape
    assert out.thickness.shape == (inner_t.n_vertices,)


def test_infer_checkpoint_roundtrip_bit_exact(tiny_corpus, tmp_path):
    cfg = tiny_config(tiny_corpus, tmp_path / "ck")
    result = train(cfg)
    model = DeformationModel.load(result.best_ckpt)
    inner_t, outer_t = synthdata.load_template(tiny_corpus)
    ctx = TemplateContext.build([(inner_t, outer_t)])
    scene = synthdata.load_scene(tiny_corpus / "scene_0004")
    out1 = infer(model, scene.intensity, ctx)
    model2 = DeformationModel.load(result.best_ckpt)
    out2 = infer(model2, scene.intensity, ctx)
    for a, b in zip(out1.surfaces, out2.surfaces):
        assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(out1.seg_probs, out2.seg_probs)


def test_training_does_not_mutate_dataset(tiny_corpus, tmp_path):
    import hashlib

    def tree_hash(root):
        h = hashlib.sha256()
        for p in sorted(root.rglob("*")):
            if p.is_file():
                h.update(p.name.encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    before = tree_hash(tiny_corpus)
    train(tiny_config(tiny_corpus, tmp_path / "mut"))
    assert tree_hash(tiny_corpus) == before


def test_evaluate_scene_perfect_prediction(tiny_corpus):
    scene = synthdata.load_scene(tiny_corpus / "scene_0004")
    parcels = synthdata.octant_parcels(2)
    inner = scene.inner.with_attrs(parcel=parcels)
    outer = scene.outer.with_attrs(parcel=parcels)
    rep = pipeline.evaluate_scene("s4", inner, outer, inner, outer,
                                  n_sample=500, seed=0)
    assert rep.per_surface["inner"]["assd"] < 1e-9
    assert rep.per_surface["outer"]["hd90"] < 1e-9
    assert rep.cross["if_count"] == 0
    assert rep.cross["dice_weighted"] == pytest.approx(1.0)
