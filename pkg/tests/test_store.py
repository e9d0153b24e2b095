import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from aplmerge.errors import AlignmentError, CheckpointFormatError, SchemaError
from aplmerge.store import (
    GroupSpec,
    Partition,
    PartitionSchema,
    TensorMap,
    build_partitions,
    check_aligned,
    checkpoint_bytes,
    load_checkpoint,
    model_partition,
    save_checkpoint,
    substitute,
)


def raw_checkpoint(header: dict | bytes, data: bytes) -> bytes:
    head = header if isinstance(header, bytes) else json.dumps(header).encode()
    return struct.pack("<Q", len(head)) + head + data


# -- TensorMap -----------------------------------------------------------


def test_tensormap_sorted_and_immutable():
    m = TensorMap({"b": np.ones(2), "a": np.zeros((1, 2))})
    assert list(m) == ["a", "b"]
    assert m.size == 4
    with pytest.raises(ValueError):
        m["a"][0, 0] = 1.0


def test_tensormap_copies_writable_inputs():
    x = np.ones(3)
    m = TensorMap({"x": x})
    x[0] = 5.0
    assert m["x"][0] == 1.0


def test_tensormap_rejects_bad_entries():
    with pytest.raises(ValueError):
        TensorMap({"z": np.zeros((0, 3))})
    with pytest.raises(TypeError):
        TensorMap({"s": np.array(["a"])})


def test_alignment_error_names_tensor():
    a = TensorMap({"w": np.zeros((2, 2))})
    b = TensorMap({"w": np.zeros((2, 3))})
    with pytest.raises(AlignmentError, match="'w'"):
        check_aligned(a, b)
    with pytest.raises(AlignmentError, match="'v'"):
        check_aligned(a, TensorMap({"v": np.zeros((2, 2))}))


# -- checkpoint format ---------------------------------------------------


def test_load_one_tensor(tmp_path):
    vals = np.array([[1.0, -2.0], [0.5, 3.25]], np.float32)
    p = tmp_path / "c.st"
    p.write_bytes(raw_checkpoint({"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}, vals.tobytes()))
    m = load_checkpoint(p)
    assert list(m) == ["w"] and m["w"].shape == (2, 2)
    assert np.array_equal(m["w"], vals)


def test_load_empty_metadata(tmp_path):
    p = tmp_path / "e.st"
    p.write_bytes(raw_checkpoint({}, b""))
    assert len(load_checkpoint(p)) == 0
    p.write_bytes(raw_checkpoint({"__metadata__": {"format": "pt"}}, b""))
    assert len(load_checkpoint(p)) == 0


def test_length_mismatch(tmp_path):
    p = tmp_path / "short.st"
    p.write_bytes(raw_checkpoint({"w": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, b"\0" * 12))
    with pytest.raises(CheckpointFormatError, match="declares 16 data bytes but file holds 12"):
        load_checkpoint(p)


@pytest.mark.parametrize(
    "header, data, pattern",
    [
        (b"{not json", b"", "malformed header"),
        ({"w": {"dtype": "F16", "shape": [2], "data_offsets": [0, 4]}}, b"\0" * 4, "unsupported dtype"),
        (b'{"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}, '
         b'"w": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}', b"\0" * 8, "duplicate"),
        ({"w": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, b"\0" * 8, "shape needs 12"),
        ({"a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
          "b": {"dtype": "F32", "shape": [1], "data_offsets": [8, 12]}}, b"\0" * 12, "gap"),
        ({"w": {"dtype": "F32", "shape": [0], "data_offsets": [0, 0]}}, b"", "bad shape"),
        ([1, 2], b"", "not a JSON object"),
    ],
)
def test_malformed_files(tmp_path, header, data, pattern):
    p = tmp_path / "bad.st"
    p.write_bytes(raw_checkpoint(header, data))
    with pytest.raises(CheckpointFormatError, match=pattern):
        load_checkpoint(p)


def test_header_length_beyond_file(tmp_path):
    p = tmp_path / "trunc.st"
    p.write_bytes(struct.pack("<Q", 1000) + b"{}")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(p)


def test_save_load_exact_values(tmp_path):
    m = TensorMap({"w": np.array([1.0, -2.5], np.float32)})
    save_checkpoint(m, tmp_path / "a.st")
    assert load_checkpoint(tmp_path / "a.st").equals(m)


def test_save_twice_byte_identical(tmp_path, rng):
    m = TensorMap({"x": rng.standard_normal((3, 4)).astype(np.float32), "b": np.ones(2, np.float32)})
    save_checkpoint(m, tmp_path / "1.st")
    save_checkpoint(m, tmp_path / "2.st")
    assert (tmp_path / "1.st").read_bytes() == (tmp_path / "2.st").read_bytes()


def test_nonfinite_written_verbatim(tmp_path):
    m = TensorMap({"w": np.array([np.nan, np.inf, -np.inf, -0.0], np.float32)})
    save_checkpoint(m, tmp_path / "nf.st")
    assert load_checkpoint(tmp_path / "nf.st").equals(m)


def test_unwritable_path_names_path(tmp_path):
    target = tmp_path / "missing_dir" / "out.st"
    with pytest.raises(OSError, match="missing_dir"):
        save_checkpoint(TensorMap({"w": np.ones(1, np.float32)}), target)


def test_save_rejects_float64(tmp_path):
    with pytest.raises(TypeError):
        save_checkpoint(TensorMap({"w": np.ones(1)}), tmp_path / "x.st")


def test_failed_write_keeps_old_file(tmp_path, monkeypatch):
    target = tmp_path / "keep.st"
    old = TensorMap({"w": np.ones(2, np.float32)})
    save_checkpoint(old, target)

    def boom(*a, **k):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr("aplmerge.store.os.replace", boom)
    with pytest.raises(OSError, match="keep.st"):
        save_checkpoint(TensorMap({"w": np.zeros(2, np.float32)}), target)
    assert load_checkpoint(target).equals(old)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["keep.st"]


float32_maps = st.dictionaries(
    st.text(min_size=1, max_size=8),
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
               elements=st.floats(width=32, allow_nan=True)),
    max_size=4,
).map(TensorMap)


@given(float32_maps)
def test_roundtrip_bit_exact(tmp_path_factory, m):
    p = tmp_path_factory.mktemp("rt") / "m.st"
    save_checkpoint(m, p)
    back = load_checkpoint(p)
    assert back.equals(m)
    assert checkpoint_bytes(back) == p.read_bytes()


# -- partitions ----------------------------------------------------------


def two_layer():
    r = np.random.default_rng(0)
    return TensorMap({
        "layer1.weight": r.standard_normal((4, 3)), "layer1.bias": r.standard_normal(4),
        "layer2.weight": r.standard_normal((2, 4)), "layer2.bias": r.standard_normal(2),
    })


LAYER_SCHEMA = {"level": "layer", "groups": [{"id": "l1", "patterns": "layer1.*"}, {"id": "l2", "patterns": "layer2.*"}]}


def test_model_level_single_partition():
    m = two_layer()
    parts = build_partitions(m, PartitionSchema("model"))
    assert len(parts) == 1 and parts[0].size == m.size


def test_layer_level():
    parts = build_partitions(two_layer(), PartitionSchema.from_dict(LAYER_SCHEMA))
    assert [p.id for p in parts] == ["l1", "l2"]
    assert [sorted(n for n, _ in p.members) for p in parts] == [
        ["layer1.bias", "layer1.weight"], ["layer2.bias", "layer2.weight"]
    ]
    assert [p.size for p in parts] == [16, 10]


def test_hidden_level_rows_plus_bias():
    m = TensorMap({"fc.weight": np.arange(12.0).reshape(4, 3), "fc.bias": np.arange(4.0)})
    schema = PartitionSchema("hidden", (GroupSpec("fc", ("fc.*",)),))
    parts = build_partitions(m, schema)
    assert [p.id for p in parts] == ["fc[0]", "fc[1]", "fc[2]", "fc[3]"]
    for h, p in enumerate(parts):
        assert p.size == 4
        got = {n: m[n][sl] for n, sl in p.members}
        assert np.array_equal(got["fc.weight"], m["fc.weight"][h : h + 1])
        assert np.array_equal(got["fc.bias"], [float(h)])


def test_hidden_level_custom_axis():
    m = TensorMap({"fc.weight": np.zeros((4, 3))})
    schema = PartitionSchema.from_dict({"level": "hidden", "groups": [{"id": "fc", "patterns": ["fc.*"], "axes": 1}]})
    parts = build_partitions(m, schema)
    assert len(parts) == 3 and all(p.size == 4 for p in parts)


def test_schema_errors():
    m = two_layer()
    with pytest.raises(SchemaError, match="layer2"):
        build_partitions(m, PartitionSchema("layer", (GroupSpec("l1", ("layer1.*",)),)))
    with pytest.raises(SchemaError, match="several groups"):
        build_partitions(m, PartitionSchema("layer", (GroupSpec("a", ("layer*",)), GroupSpec("b", ("*.bias",)))))
    with pytest.raises(SchemaError, match="out of range"):
        build_partitions(m, PartitionSchema("hidden", (GroupSpec("all", ("*",), {"*": 2}),)))
    with pytest.raises(SchemaError, match="matches no tensor"):
        build_partitions(m, PartitionSchema("layer", (GroupSpec("x", ("nothing*",)), GroupSpec("all", ("*",)))))
    with pytest.raises(SchemaError):
        PartitionSchema("pixel", ())


def test_implicit_residual_group():
    m = two_layer()
    schema = PartitionSchema("layer", (GroupSpec("l1", ("layer1.*",)),), residual="implicit-residual-group")
    parts = build_partitions(m, schema)
    assert [p.id for p in parts] == ["l1", "__residual__"]
    assert parts[1].residual and parts[1].size == 10


def test_schema_file_roundtrip(tmp_path):
    schema = PartitionSchema.from_dict(LAYER_SCHEMA)
    (tmp_path / "s.json").write_text(json.dumps(schema.to_dict()))
    assert PartitionSchema.load(tmp_path / "s.json") == schema


def covered(m, parts):
    count = {n: np.zeros(m[n].shape, int) for n in m}
    for p in parts:
        for n, sl in p.members:
            count[n][sl] += 1
    return count


@pytest.mark.parametrize("level", ["model", "layer", "hidden"])
def test_partitions_disjoint_and_covering(level):
    m = two_layer()
    parts = build_partitions(m, PartitionSchema.from_dict(LAYER_SCHEMA).with_level(level))
    assert sum(p.size for p in parts) == m.size
    assert all((c == 1).all() for c in covered(m, parts).values())


# -- substitute ----------------------------------------------------------


def test_substitute_examples():
    fine = two_layer()
    base = TensorMap({k: v + 1.0 for k, v in fine.items()})
    assert substitute(fine, base, model_partition(fine)).equals(base)
    assert substitute(fine, base, Partition.of("empty", [])).equals(fine)
    l1 = build_partitions(fine, PartitionSchema.from_dict(LAYER_SCHEMA))[0]
    out = substitute(fine, base, l1)
    for n in fine:
        assert np.array_equal(out[n], (base if n.startswith("layer1") else fine)[n])


def test_substitute_does_not_mutate():
    fine = two_layer()
    base = TensorMap({k: v * 0 for k, v in fine.items()})
    before = {k: v.copy() for k, v in fine.items()}
    substitute(fine, base, model_partition(fine))
    assert all(np.array_equal(fine[k], before[k]) for k in fine)


def test_substitute_out_of_bounds():
    fine = two_layer()
    bad = Partition.of("bad", [("layer1.bias", (slice(0, 9, 1),))])
    with pytest.raises(AlignmentError):
        substitute(fine, fine, bad)


@given(st.integers(0, 10_000), st.sampled_from(["model", "layer", "hidden"]))
def test_substitute_involution_and_identity(seed, level):
    r = np.random.default_rng(seed)
    f = two_layer()
    b = TensorMap({k: r.standard_normal(v.shape) for k, v in f.items()})
    for p in build_partitions(f, PartitionSchema.from_dict(LAYER_SCHEMA).with_level(level)):
        assert substitute(substitute(f, b, p), f, p).equals(f)
        assert substitute(f, f, p).equals(f)
