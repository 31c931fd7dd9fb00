import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from saefd import anchors
from saefd.anchors import AnchorBuffer, AnchorRecord, capture_anchors, collate, sample_anchor_batch, to_float16
from saefd.container import FormatError
from saefd.model import BaseModel, LoraAdapter, collect_activations, batch_tensors
from saefd.synth import GenConfig, generate_task_sequence


@pytest.fixture(scope="module")
def setting():
    cfg = GenConfig(d_in=8, train_size=60, test_size=20)
    seq = generate_task_sequence(2, cfg, seed=3)
    model = BaseModel(8, 12, seed=0)
    adapter = LoraAdapter(model.layer_shapes(), rank=2, alpha=8, seed=0)
    with torch.no_grad():
        for B in adapter.B:
            B.normal_(0, 0.1, generator=torch.Generator().manual_seed(1))
    return seq, model, adapter


def make_record(task_id, sample_id, L=3, d_in=2, d=4, fill=0.0):
    return AnchorRecord(task_id, sample_id, np.full((L, d_in), fill, np.float32), np.ones(L, np.uint8),
                        np.full((L, d), fill, np.float16))


def test_float16_rounding():
    assert float(to_float16([1 / 3])[0]) == 0.333251953125
    # halfway between 2048 and 2050 rounds to the even mantissa
    assert float(to_float16([2049.0])[0]) == 2048.0
    assert float(to_float16([2051.0])[0]) == 2052.0


def test_capture_is_deterministic(setting):
    seq, model, adapter = setting
    a = capture_anchors(model, adapter, seq.train[0], 10, seed=7)
    b = capture_anchors(model, adapter, seq.train[0], 10, seed=7)
    assert [r.sample_id for r in a] == [r.sample_id for r in b]
    assert all(x.activations.tobytes() == y.activations.tobytes() for x, y in zip(a, b))
    c = capture_anchors(model, adapter, seq.train[0], 10, seed=8)
    assert [r.sample_id for r in a] != [r.sample_id for r in c]


def test_capture_matches_model_activations(setting):
    seq, model, adapter = setting
    recs = capture_anchors(model, adapter, seq.train[1], 5, seed=0)
    assert all(r.task_id == seq.train[1].task_ids[0] for r in recs)
    ids = [r.sample_id for r in recs]
    pos = [int(np.flatnonzero(seq.train[1].sample_ids == i)[0]) for i in ids]
    x, m, _ = batch_tensors(seq.train[1].subset(pos))
    acts = collect_activations(model, adapter, x, m).numpy()
    for i, r in enumerate(recs):
        L = len(r.mask)
        assert np.array_equal(r.activations, acts[i, :L].astype(np.float16))
        assert r.mask.sum() == m[i].sum()


def test_capture_errors(setting):
    seq, model, adapter = setting
    with pytest.raises(ValueError):
        capture_anchors(model, adapter, seq.train[0], len(seq.train[0]) + 1, seed=0)
    with pytest.raises(TypeError):
        AnchorRecord(0, 0, np.zeros((1, 2), np.float32), np.ones(1, np.uint8), np.zeros((1, 2), np.float32))


def test_append_counts_and_rejections():
    buf = AnchorBuffer()
    anchors.append(buf, [])
    assert len(buf) == 0
    anchors.append(buf, [make_record(1, i) for i in range(5)])
    anchors.append(buf, [make_record(2, i) for i in range(5)])
    assert len(buf) == 10 and buf.per_task_counts == {1: 5, 2: 5}
    with pytest.raises(ValueError):
        anchors.append(buf, [make_record(1, 99)])
    with pytest.raises(ValueError):
        anchors.append(buf, [make_record(3, 0), make_record(4, 0)])
    assert len(buf) == 10


def test_sampling_cases():
    single = AnchorBuffer()
    anchors.append(single, [make_record(1, 42)])
    batch = sample_anchor_batch(single, 16, np.random.default_rng(0))
    assert all(r.sample_id == 42 for r in batch)
    with pytest.raises(ValueError):
        sample_anchor_batch(AnchorBuffer(), 4, np.random.default_rng(0))
    buf = AnchorBuffer()
    anchors.append(buf, [make_record(1, i) for i in range(5)])
    anchors.append(buf, [make_record(2, i) for i in range(5)])
    a = [r.sample_id for r in sample_anchor_batch(buf, 50, np.random.default_rng(9))]
    b = [r.sample_id for r in sample_anchor_batch(buf, 50, np.random.default_rng(9))]
    assert a == b


def test_sampling_is_uniform_over_tasks_chi_square():
    buf = AnchorBuffer()
    anchors.append(buf, [make_record(1, i) for i in range(200)])
    anchors.append(buf, [make_record(2, i) for i in range(200)])
    draws = sample_anchor_batch(buf, 10_000, np.random.default_rng(2024))
    counts = np.bincount([r.task_id for r in draws], minlength=3)[1:]
    assert chisquare(counts).pvalue > 0.01


def test_sampling_is_uniform_over_records_not_tasks():
    buf = AnchorBuffer()
    anchors.append(buf, [make_record(1, i) for i in range(300)])
    anchors.append(buf, [make_record(2, i) for i in range(100)])
    draws = sample_anchor_batch(buf, 10_000, np.random.default_rng(5))
    counts = np.bincount([r.task_id for r in draws], minlength=3)[1:]
    assert chisquare(counts, f_exp=[7500, 2500]).pvalue > 0.01


def test_collate_pads_and_upcasts():
    recs = [make_record(1, 0, L=2, fill=1 / 3), make_record(1, 1, L=4, fill=2.0)]
    x, m, a = collate(recs)
    assert x.shape == (2, 4, 2) and a.shape == (2, 4, 4)
    assert m.tolist() == [[1, 1, 0, 0], [1, 1, 1, 1]]
    assert a[0, 0, 0].item() == 0.333251953125
    assert a[0, 3].abs().sum() == 0


def test_save_load_roundtrip(tmp_path, setting):
    seq, model, adapter = setting
    buf = AnchorBuffer()
    anchors.append(buf, capture_anchors(model, adapter, seq.train[0], 12, seed=1))
    anchors.append(buf, capture_anchors(model, adapter, seq.train[1], 12, seed=2))
    anchors.save(buf, tmp_path / "a.sfda")
    loaded = anchors.load(tmp_path / "a.sfda")
    anchors.save(loaded, tmp_path / "b.sfda")
    assert (tmp_path / "a.sfda").read_bytes() == (tmp_path / "b.sfda").read_bytes()
    assert loaded.checksum() == buf.checksum()
    assert loaded.per_task_counts == buf.per_task_counts
    assert (tmp_path / "a.sfda").read_bytes()[:4] == b"SFDA"


def test_storage_size_matches_formula(tmp_path, setting):
    seq, model, adapter = setting
    buf = AnchorBuffer()
    anchors.append(buf, capture_anchors(model, adapter, seq.train[0], 40, seed=1))
    anchors.save(buf, tmp_path / "a.sfda")
    d_in, d = 8, model.activation_dim
    formula = sum(2 * len(r.mask) * d + 4 * len(r.mask) * d_in + len(r.mask) for r in buf.records)
    size = (tmp_path / "a.sfda").stat().st_size
    assert abs(size - formula) / formula < 0.05


def test_empty_buffer_roundtrip(tmp_path):
    anchors.save(AnchorBuffer(), tmp_path / "e.sfda")
    assert len(anchors.load(tmp_path / "e.sfda")) == 0


def test_corrupt_files_raise_format_error(tmp_path):
    buf = AnchorBuffer()
    anchors.append(buf, [make_record(1, i) for i in range(3)])
    anchors.save(buf, tmp_path / "a.sfda")
    raw = (tmp_path / "a.sfda").read_bytes()
    cases = {"trunc": raw[:-5], "magic": b"XXXX" + raw[4:], "version": raw[:4] + b"\x09\x00" + raw[6:],
             "extra": raw + b"\x00"}
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(FormatError) as info:
            anchors.load(tmp_path / name)
        assert info.value.offset >= 0
