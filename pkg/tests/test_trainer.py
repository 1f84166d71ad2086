import json

import numpy as np
import pytest

from invoxel import diffcore as dc
from invoxel import trainer as T
from invoxel.field import named_parameters
from oracles import vanilla_nerf_step

FLAGS_OFF = dict(cvt_enabled=False, contrastive_enabled=False, voxel_sampling_enabled=False)


def small(**kw):
    base = dict(V=4, R=4, iters=200, depth=3, width=16, skip=1, color_width=8, pos_freqs=3,
                dir_freqs=2, cvt_pos_freqs=3, n_coarse=8, n_fine=8, S=4, P=3, num_blocks=1,
                log_every=0)
    base.update(kw)
    return T.toy_config(**base)


@pytest.fixture(scope="module")
def data_for(tiny_dataset):
    cache = {}

    def get(cfg):
        key = (cfg.voxel_sampling_enabled, cfg.grid_resolution)
        if key not in cache:
            cache[key] = T.prepare_data(cfg, tiny_dataset)
        return cache[key]
    return get


def test_config_validation_and_dependencies():
    with pytest.raises(ValueError, match="requires voxel_sampling"):
        T.TrainConfig(voxel_sampling_enabled=False, contrastive_enabled=False)
    with pytest.raises(ValueError, match="requires cvt"):
        T.TrainConfig(cvt_enabled=False)
    with pytest.raises(ValueError, match="divisible"):
        T.TrainConfig(width=30)
    with pytest.raises(ValueError, match="unknown config keys"):
        T.TrainConfig.from_dict({"V": 4, "learning_rate": 1.0})


def test_config_json_roundtrip_and_digest(tmp_path):
    cfg = small(seed=3, toy={"H": 16, "W": 16})
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    back = T.TrainConfig.from_json_file(p)
    assert back == cfg and back.digest() == cfg.digest()
    assert small(seed=4).digest() != cfg.digest()
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ValueError, match="invalid JSON"):
        T.TrainConfig.from_json_file(tmp_path / "bad.json")


def test_learning_rate_schedule():
    cfg = small(iters=100, lr0=1e-3, lr_final=1e-4)
    assert T.learning_rate(cfg, 0) == pytest.approx(1e-3)
    assert T.learning_rate(cfg, 100) == pytest.approx(1e-4)
    st = T.init_state(cfg)
    assert st.adam.lr == pytest.approx(1e-3)


def test_step_report_and_loss_decreases(data_for):
    cfg = small(iters=150, lr0=5e-3, lr_final=1e-3)
    data = data_for(cfg)
    st = T.init_state(cfg)
    rows = [T.train_step(st, data) for _ in range(150)]
    assert set(rows[0]) == set(T.LOSS_COLUMNS)
    assert rows[0]["iter"] == 0 and st.iteration == 150
    assert rows[0]["contrast"] > 0
    first = np.mean([r["mse_fine"] for r in rows[:20]])
    last = np.mean([r["mse_fine"] for r in rows[-20:]])
    assert last < first


def test_every_parameter_group_receives_gradient(data_for):
    cfg = small()
    st = T.init_state(cfg)
    before = {k: v.data.copy() for k, v in st.named_parameters().items()}
    T.train_step(st, data_for(cfg))
    changed = {k.split(".")[0] for k, v in st.named_parameters().items()
               if not np.array_equal(v.data, before[k])}
    assert changed == {"coarse", "fine", "cvt"}


def test_same_seed_same_csv(tmp_path, data_for):
    cfg = small(iters=30, seed=5)
    for name in ("a", "b"):
        T.train(cfg, tmp_path / name, data=data_for(cfg))
    a = (tmp_path / "a" / "losses.csv").read_bytes()
    assert a == (tmp_path / "b" / "losses.csv").read_bytes()
    assert a.splitlines()[0] == b"iter,mse_coarse,mse_fine,contrast,total,lr"
    assert len(a.splitlines()) == 31


def test_checkpoint_resume_is_bit_identical(tmp_path, data_for):
    cfg = small(iters=40, seed=2)
    data = data_for(cfg)
    full, rows_full = T.train(cfg, data=data)
    half, rows_a = T.train(cfg, data=data, iters=20)
    T.save_checkpoint(half, tmp_path / "half.bin")
    resumed = T.load_checkpoint(tmp_path / "half.bin", expect=cfg)
    resumed, rows_b = T.train(cfg, data=data, state=resumed)
    assert rows_a + rows_b == rows_full
    for (k, a), b in zip(full.named_parameters().items(), resumed.named_parameters().values()):
        assert np.array_equal(a.data, b.data), k


def test_checkpoint_bytes_idempotent_and_guarded(tmp_path):
    cfg = small()
    st = T.init_state(cfg)
    p = tmp_path / "a.bin"
    T.save_checkpoint(st, p)
    T.save_checkpoint(T.load_checkpoint(p), tmp_path / "b.bin")
    assert p.read_bytes() == (tmp_path / "b.bin").read_bytes()
    with pytest.raises(ValueError, match="different config"):
        T.load_checkpoint(p, expect=small(seed=99))
    raw = p.read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="truncated"):
        T.load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError, match="magic"):
        T.load_checkpoint(tmp_path / "m.bin")
    bad = bytearray(raw)
    bad[60] ^= 0xFF          # inside the config JSON
    (tmp_path / "c.bin").write_bytes(bytes(bad))
    with pytest.raises(ValueError):
        T.load_checkpoint(tmp_path / "c.bin")


def test_no_cvt_leaves_transformer_untouched(data_for):
    cfg = small(cvt_enabled=False, contrastive_enabled=False)
    st = T.init_state(cfg)
    before = {k: v.data.copy() for k, v in named_parameters(st.cvt).items()}
    data = data_for(cfg)
    for _ in range(50):
        rep = T.train_step(st, data)
    assert rep["contrast"] == 0.0
    for k, v in named_parameters(st.cvt).items():
        assert np.array_equal(v.data, before[k]), k


def test_flags_off_equals_vanilla_reference(data_for):
    cfg = small(seed=8, **FLAGS_OFF)
    data = data_for(cfg)
    st = T.init_state(cfg)
    ref = T.init_state(cfg)
    ref_params = list(named_parameters(ref.coarse).values()) + list(named_parameters(ref.fine).values())
    ref_adam = dc.init_adam(ref_params, cfg.lr0, st.adam.decay)
    for _ in range(25):
        rep = T.train_step(st, data)
        lc, lf = vanilla_nerf_step(ref.coarse, ref.fine, ref_adam, data.rays, ref.rng, cfg)
        assert (rep["mse_coarse"], rep["mse_fine"]) == (lc, lf)
    for a, b in zip(named_parameters(st.fine).values(), named_parameters(ref.fine).values()):
        assert np.array_equal(a.data, b.data)


def test_divergence_reports_iteration(data_for):
    cfg = small()
    st = T.init_state(cfg)
    st.fine.trunk[0].weight.data[:] = np.nan
    with pytest.raises((T.TrainingDiverged, ValueError)):
        T.train_step(st, data_for(cfg))
    dc.current_graph().clear()


def test_render_rays_is_deterministic(tiny_dataset):
    cfg = small()
    st = T.init_state(cfg)
    a = T.render_view(st, tiny_dataset, 3)
    b = T.render_view(st, tiny_dataset, 3)
    assert a.shape == (24, 24, 3) and np.array_equal(a, b)
    assert len(dc.current_graph().nodes) == 0


def test_train_writes_outputs(tmp_path, data_for):
    cfg = small(iters=6, checkpoint_every=3)
    T.train(cfg, tmp_path, data=data_for(cfg))
    assert {p.name for p in tmp_path.iterdir()} >= {"losses.csv", "final.bin", "ckpt_000003.bin",
                                                    "ckpt_000006.bin"}
    json.loads(T.load_checkpoint(tmp_path / "final.bin").cfg.to_json())


def test_train_views_subset(tiny_dataset):
    sub = T.subset_train_views(tiny_dataset, 2)
    assert len(sub.indices("train")) == 2
    assert len(sub.indices("test")) == len(tiny_dataset.indices("test"))
    with pytest.raises(ValueError, match="train_views"):
        T.subset_train_views(tiny_dataset, 9)


def test_toy_loss_drops_by_thirty_percent_in_500_steps(tiny_dataset):
    cfg = T.toy_config(seed=4, log_every=0)
    data = T.prepare_data(cfg, tiny_dataset)
    st = T.init_state(cfg)
    rows = [T.train_step(st, data) for _ in range(500)]
    first = np.mean([r["total"] for r in rows[:10]])
    last = np.mean([r["total"] for r in rows[-10:]])
    assert 0 < rows[0]["total"] and last <= 0.7 * first, (first, last)
