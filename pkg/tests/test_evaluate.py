import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgvid.data import Dataset, VideoClip, to_model_input
from tgvid.evaluate import (VARIANTS, EnsembleMember, EnsembleSpec, LogitRecord, TTAVariant, accuracy,
                            ensemble, evaluate, export_logits, read_logits, variant_from_cli)
from tgvid.models import ModelConfig, build_model
from tgvid.ops import softmax

# pre-softmax and post-softmax averaging disagree on this pair; found by brute-force
# search over small integer logit pairs before the build
DISAGREE_A = np.array([-4.0, -2.0, 0.0])
DISAGREE_B = np.array([-1.0, -1.0, -4.0])

CFG = ModelConfig(kind="tsm", clip_len=4, stem_channels=8, stage_blocks=(1,), input_size=16)


def rec(video, model, logits, name="center_crop", stride=1, mode="rgb"):
    return LogitRecord(video, model, TTAVariant(name, stride, mode), np.asarray(logits, dtype=float))


def test_all_table_variant_names_parse():
    for kebab in ["center-crop", "horizontal-flip", "random-crop", "reverse-order", "normal-reverse-concat"]:
        assert variant_from_cli(kebab) in VARIANTS
    with pytest.raises(ValueError, match="center-crop"):
        variant_from_cli("five-crop")


def test_accuracy():
    assert accuracy([1, 2], [1, 2]) == 1.0
    assert accuracy([0, 0], [1, 2]) == 0.0
    assert accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 0.75
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])


def test_ensemble_examples():
    records = [rec("v", "a", [1, 2]), rec("v", "b", [3, 4])]
    spec = EnsembleSpec([EnsembleMember("a", TTAVariant()), EnsembleMember("b", TTAVariant())])
    fused, acc = ensemble(spec, records, {"v": 1})
    np.testing.assert_array_equal(fused["v"], [2.0, 3.0])
    assert acc == 1.0
    single, _ = ensemble(EnsembleSpec.parse("a:center-crop"), records)
    np.testing.assert_array_equal(single["v"], [1.0, 2.0])


def test_ensemble_missing_member_named():
    with pytest.raises(KeyError, match="video v, model b, variant horizontal_flip:1:rgb"):
        ensemble(EnsembleSpec.parse("a:center-crop, b:horizontal-flip"), [rec("v", "a", [1, 2])])


def test_pre_softmax_fixture_disagrees():
    records = [rec("v", "a", DISAGREE_A), rec("v", "b", DISAGREE_B)]
    fused, _ = ensemble(EnsembleSpec.parse("a:center-crop, b:center-crop"), records)
    prob_avg = (softmax(DISAGREE_A) + softmax(DISAGREE_B)) / 2
    np.testing.assert_array_equal(fused["v"], (DISAGREE_A + DISAGREE_B) / 2)
    assert np.argmax(fused["v"]) == 1 and np.argmax(prob_avg) == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_ensemble_invariants(seed, scale):
    rng = np.random.default_rng(seed)
    members = [("m0", "center-crop"), ("m1", "horizontal-flip"), ("m2", "reverse-order")]
    mult = rng.integers(1, 4, len(members))
    records = [rec(f"v{i}", m, rng.standard_normal(4), variant_from_cli(v)) for i in range(3) for m, v in members]
    text = ", ".join(f"{m}:{v}*{k}" for (m, v), k in zip(members, mult))
    fused, _ = ensemble(EnsembleSpec.parse(text), records)
    perm = rng.permutation(len(members))
    text_perm = ", ".join(f"{members[i][0]}:{members[i][1]}*{mult[i]}" for i in perm)
    permuted, _ = ensemble(EnsembleSpec.parse(text_perm), records[::-1])
    text_scaled = ", ".join(f"{m}:{v}*{k * scale}" for (m, v), k in zip(members, mult))
    scaled, _ = ensemble(EnsembleSpec.parse(text_scaled), records)
    for v in fused:
        np.testing.assert_allclose(permuted[v], fused[v], rtol=1e-12)
        np.testing.assert_allclose(scaled[v], fused[v], rtol=1e-12)
        assert np.argmax(fused[v]) == np.argmax(softmax(fused[v]))


def test_identical_records_fuse_to_themselves():
    z = np.array([0.1, -2.5, 3.0])
    records = [rec("v", "a", z), rec("v", "b", z, "horizontal_flip")]
    fused, _ = ensemble(EnsembleSpec.parse("a:center-crop*3, b:horizontal-flip"), records)
    np.testing.assert_array_equal(fused["v"], z)


def test_logit_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    records = [rec(f"v{i}", m, rng.standard_normal(4) * 1e3, n)
               for i in range(5) for m in ("x", "y") for n in ("center_crop", "random_crop", "reverse_order")]
    path = tmp_path / "l.txt"
    export_logits(records, path, labels={f"v{i}": i % 4 for i in range(5)})
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 6 * 5
    back, labels = read_logits(path)
    assert labels["v3"] == 3
    want = sorted(records, key=lambda r: r.sort_key)
    for a, b in zip(back, want):
        assert a.sort_key == b.sort_key and a.logits.tobytes() == b.logits.tobytes()
    export_logits(back, tmp_path / "again.txt", labels=labels)
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()


def test_logit_file_edge_cases(tmp_path):
    export_logits([], tmp_path / "empty")
    assert (tmp_path / "empty").read_bytes() == b""
    with pytest.raises(ValueError, match="classes"):
        export_logits([rec("a", "m", [1, 2]), rec("b", "m", [1, 2, 3])], tmp_path / "bad")
    path = tmp_path / "app"
    export_logits([rec("a", "m", [1, 2])], path)
    export_logits([rec("b", "m", [3, 4])], path, append=True)
    back, _ = read_logits(path)
    assert [r.video_id for r in back] == ["a", "b"]
    with pytest.raises(ValueError):
        export_logits([rec("c", "m", [1, 2, 3])], path, append=True)


def _tiny_dataset(n=6, t=4):
    rng = np.random.default_rng(1)
    clips = [VideoClip(f"c{i}", rng.random((3, t, 16, 16)).astype(np.float32), i % 4) for i in range(n)]
    return Dataset(clips, 4, np.full(3, 0.5), np.full(3, 0.25))


def _warm(model, ds):
    model(np.stack([to_model_input(c.frames[:, :CFG.clip_len], "rgb", ds.mean, ds.std) for c in ds.clips]))
    return model


def test_one_clip_on_exact_length_video_is_plain_forward():
    ds = _tiny_dataset()
    model = _warm(build_model(CFG, 0), ds)
    _, records = evaluate(model, ds.clips, TTAVariant(), ds, num_clips=1)
    model.eval()
    for clip, r in zip(ds.clips, records):
        direct = model(to_model_input(clip.frames, "rgb", ds.mean, ds.std)[None]).data[0]
        np.testing.assert_allclose(r.logits, direct, rtol=0, atol=1e-12)


def test_evaluate_deterministic_and_order_invariant():
    ds = _tiny_dataset(t=9)
    model = _warm(build_model(CFG, 0), ds)
    model.train()
    v = TTAVariant("random_crop", 2)
    a, ra = evaluate(model, ds.clips, v, ds, num_clips=10, seed=5, crop=(20, 16))
    b, rb = evaluate(model, ds.clips[::-1], v, ds, num_clips=10, seed=5, crop=(20, 16))
    assert a == b
    by_id = {r.video_id: r.logits.tobytes() for r in rb}
    assert all(by_id[r.video_id] == r.logits.tobytes() for r in ra)


@pytest.mark.parametrize("name", VARIANTS)
def test_every_variant_runs(name):
    ds = _tiny_dataset(t=10)
    model = _warm(build_model(CFG, 0), ds)
    acc, records = evaluate(model, ds.clips, TTAVariant(name), ds, num_clips=2, seed=1)
    assert 0 <= acc <= 1 and len(records) == len(ds.clips)


def test_evaluate_rejects_empty_split():
    with pytest.raises(ValueError, match="empty"):
        evaluate(build_model(CFG, 0), [], TTAVariant(), _tiny_dataset())
