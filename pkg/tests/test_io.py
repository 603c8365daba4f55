import json
import struct
import warnings

import numpy as np
import pytest

from attnshap.attribution import attribute
from attnshap.cav import Cav, SensitivityRecord
from attnshap.exceptions import DataError, InvalidInputError
from attnshap.io import (
    MAGIC,
    Record,
    config_hash,
    dump_trace,
    emit_heatmap,
    heatmap_colors,
    load_cavs,
    load_dataset,
    load_model,
    load_trace,
    read_ppm,
    read_tensors,
    save_cavs,
    save_dataset,
    save_model,
    token_records,
    write_csv,
    write_json,
    write_tensors,
)
from attnshap.transformer import ToyTransformer, attention_gradients, patchify


class TestDataset:
    def test_round_trip_tokens(self, tmp_path):
        recs = token_records([[2, 3], [4, 5, 6]], y=[0, 1], concept="C", prefix="s")
        save_dataset(tmp_path / "d.jsonl", recs)
        back = load_dataset(tmp_path / "d.jsonl", vocab_size=10)
        assert [r.id for r in back] == ["s0", "s1"]
        np.testing.assert_array_equal(back[1].token_ids, [4, 5, 6])
        assert [r.label for r in back] == [0, 1]
        assert back[0].concept == "C"

    def test_round_trip_pixels_bit_exact(self, tmp_path, rng):
        img = rng.normal(size=(4, 4, 3))
        save_dataset(tmp_path / "i.jsonl", [Record("a", pixels=img, label=2)])
        (back,) = load_dataset(tmp_path / "i.jsonl")
        assert back.pixels.tobytes() == img.tobytes()
        assert back.label == 2

    def test_empty_file_warns(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        with pytest.warns(UserWarning, match="empty"):
            assert load_dataset(p) == []

    def test_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "b.jsonl"
        p.write_text('\n{"id": "x", "token_ids": [2]}\n\n')
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert len(load_dataset(p)) == 1

    def test_vocab_violation_names_line(self, tmp_path):
        p = tmp_path / "v.jsonl"
        p.write_text('{"token_ids": [2]}\n{"token_ids": [2, 99]}\n')
        with pytest.raises(DataError, match="line 2"):
            load_dataset(p, vocab_size=16)

    @pytest.mark.parametrize("line", [
        "not json",
        "[1, 2]",
        '{"token_ids": []}',
        '{"token_ids": [1.5]}',
        '{"token_ids": [-1]}',
        '{"token_ids": [2], "label": -1}',
        '{"token_ids": [2], "extra": 1}',
        '{"label": 1}',
        '{"pixels": "!!", "shape": [1]}',
    ])
    def test_malformed(self, tmp_path, line):
        p = tmp_path / "m.jsonl"
        p.write_text(line + "\n")
        with pytest.raises(DataError, match="line 1"):
            load_dataset(p)

    def test_mixed_kinds(self, tmp_path):
        save_dataset(tmp_path / "x.jsonl",
                     [Record("a", token_ids=np.array([2])), Record("b", pixels=np.zeros((2, 2, 1)))])
        with pytest.raises(DataError, match="line 2"):
            load_dataset(tmp_path / "x.jsonl")


class TestContainer:
    def test_round_trip(self, tmp_path, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(4,))
        write_tensors(tmp_path / "t.bin", {"note": "x"}, {"a": a, "b": b})
        header, arrays = read_tensors(tmp_path / "t.bin")
        assert header["note"] == "x"
        assert header["arrays"] == [{"name": "a", "shape": [2, 3]}, {"name": "b", "shape": [4]}]
        assert arrays["a"].tobytes() == a.tobytes()
        assert arrays["b"].tobytes() == b.tobytes()

    def test_layout(self, tmp_path):
        write_tensors(tmp_path / "t.bin", {}, {"a": np.array([1.0, -2.0])})
        raw = (tmp_path / "t.bin").read_bytes()
        assert raw[:8] == MAGIC
        (hlen,) = struct.unpack("<Q", raw[8:16])
        json.loads(raw[16:16 + hlen])
        assert raw[16 + hlen:] == struct.pack("<2d", 1.0, -2.0)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(b"NOTMAGIC" + bytes(8))
        with pytest.raises(DataError, match="not an ATTNSHAP"):
            read_tensors(tmp_path / "t.bin")

    def test_truncated_blob(self, tmp_path):
        write_tensors(tmp_path / "t.bin", {}, {"a": np.ones(5)})
        raw = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(raw[:-3])
        with pytest.raises(DataError, match="blob"):
            read_tensors(tmp_path / "t.bin")

    def test_truncated_header(self, tmp_path):
        write_tensors(tmp_path / "t.bin", {}, {"a": np.ones(1)})
        raw = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(raw[:20])
        with pytest.raises(DataError, match="truncated"):
            read_tensors(tmp_path / "t.bin")


class TestTrace:
    def test_round_trip_bit_exact(self, tmp_path, tiny_model):
        tr = tiny_model.forward([2, 3, 4, 5])
        g = attention_gradients(tr, 1)
        dump_trace(tmp_path / "tr.bin", tr.attention, g, config_hash="abc")
        attn, grads = load_trace(tmp_path / "tr.bin")
        assert attn.weights.tobytes() == tr.attention.weights.tobytes()
        assert grads.grads.tobytes() == g.grads.tobytes()
        assert grads.class_id == 1
        header, _ = read_tensors(tmp_path / "tr.bin")
        assert header["config_hash"] == "abc"
        assert header["kind"] == "attention+gradient"

    def test_attention_only(self, tmp_path, tiny_model):
        tr = tiny_model.forward([2, 3])
        dump_trace(tmp_path / "tr.bin", tr.attention)
        attn, grads = load_trace(tmp_path / "tr.bin")
        assert grads is None and attn.shape == tr.attention.shape

    def test_header_shape_mismatch(self, tmp_path, tiny_model):
        tr = tiny_model.forward([2, 3])
        L, H, N, _ = tr.attention.shape
        write_tensors(tmp_path / "tr.bin", {"L": L, "H": H, "N": N + 1},
                      {"attention": tr.attention.weights})
        with pytest.raises(DataError, match="header says"):
            load_trace(tmp_path / "tr.bin")


class TestCheckpoints:
    def test_model_round_trip(self, tmp_path, tiny_model):
        save_model(tmp_path / "m.bin", tiny_model, config_hash="h")
        back = load_model(tmp_path / "m.bin")
        assert back.get_params() == tiny_model.get_params()
        x = [2, 3, 4, 5]
        assert back.forward(x).probs.tobytes() == tiny_model.forward(x).probs.tobytes()

    def test_model_kind_checked(self, tmp_path):
        write_tensors(tmp_path / "m.bin", {"kind": "cavs"}, {})
        with pytest.raises(DataError, match="not a model"):
            load_model(tmp_path / "m.bin")

    def test_cav_round_trip(self, tmp_path, rng):
        cavs = []
        for i in range(3):
            v = rng.normal(size=8)
            cavs.append(Cav(f"c{i}", i, v / np.linalg.norm(v), 0.5 + i / 10))
        save_cavs(tmp_path / "c.bin", cavs)
        back = load_cavs(tmp_path / "c.bin")
        for a, b in zip(cavs, back):
            assert (a.concept, a.layer, a.accuracy) == (b.concept, b.layer, b.accuracy)
            assert a.direction.tobytes() == b.direction.tobytes()

    def test_no_cavs(self, tmp_path):
        with pytest.raises(InvalidInputError):
            save_cavs(tmp_path / "c.bin", [])


class TestReports:
    def test_config_hash_ignores_key_order(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})
        assert len(config_hash({})) == 64

    def test_write_json_is_canonical(self, tmp_path):
        write_json(tmp_path / "a.json", {"b": 1, "a": 0.1})
        write_json(tmp_path / "b.json", {"a": 0.1, "b": 1})
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.json").read_text().endswith("\n")

    def test_csv_floats_round_trip(self, tmp_path):
        v = 0.1 + 0.2
        write_csv(tmp_path / "r.csv", [{"m": "x", "v": v}], ["m", "v"])
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "m,v"
        assert float(lines[1].split(",")[1]) == v


class TestHeatmap:
    def test_all_zero_is_midpoint(self):
        np.testing.assert_array_equal(heatmap_colors(np.zeros(4)), np.full((4, 3), 255))

    def test_single_positive(self):
        rgb = heatmap_colors([0.0, 2.0, 0.0])
        changed = np.any(rgb != 255, axis=1)
        np.testing.assert_array_equal(changed, [False, True, False])
        np.testing.assert_array_equal(rgb[1], [255, 0, 0])

    def test_sign_and_scale(self):
        rgb = heatmap_colors([-4.0, -2.0, 4.0])
        np.testing.assert_array_equal(rgb[0], [0, 0, 255])
        np.testing.assert_array_equal(rgb[1], [128, 128, 255])
        np.testing.assert_array_equal(rgb[2], [255, 0, 0])

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            heatmap_colors([np.nan])

    def test_strip_for_tokens(self, tmp_path, tiny_model):
        res = attribute("Grad-SAM", tiny_model, [2, 3, 4], k=0)
        emit_heatmap(res, tmp_path / "h.ppm", cell=4, config_hash="deadbeef")
        rgb, comments = read_ppm(tmp_path / "h.ppm")
        assert rgb.shape == (4, 12, 3)
        assert comments == ["config_hash=deadbeef"]

    def test_image_grid(self, tmp_path, rng):
        img = rng.normal(size=(4, 4, 1))
        patches = patchify(img, 2)
        m = ToyTransformer(patch_dim=4, max_len=8, seed=0).initialize()
        res = attribute("Shapley-Grad-Att-Mutual", m, patches, k=0)
        emit_heatmap(res, tmp_path / "g.ppm", layout=(2, 2), cell=1)
        rgb, _ = read_ppm(tmp_path / "g.ppm")
        assert rgb.shape == (2, 2, 3)
        np.testing.assert_array_equal(rgb.reshape(4, 3), heatmap_colors(res.scores))

    def test_sensitivity_drops_cls(self, tmp_path):
        rec = SensitivityRecord("x", 0, 1, np.array([9.0, 0.0, 1.0]), 0.5, np.ones(3) / 3)
        emit_heatmap(rec, tmp_path / "s.ppm", cell=1)
        rgb, _ = read_ppm(tmp_path / "s.ppm")
        np.testing.assert_array_equal(rgb[0], [[255, 255, 255], [255, 0, 0]])

    def test_layout_mismatch(self, tmp_path):
        with pytest.raises(InvalidInputError):
            emit_heatmap(np.ones(3), tmp_path / "x.ppm", layout=(2, 2))
