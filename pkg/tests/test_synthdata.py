import filecmp
import struct

import numpy as np
import pytest

from mmalign import synthdata as S
from mmalign.errors import BadSpecError, EmptyDatasetError, FormatError


def records_equal(a, b):
    if a.id != b.id or a.modalities != b.modalities or a.properties != b.properties:
        return False
    same = np.array_equal(a.latent, b.latent)
    if a.crystal is not None:
        same &= all(
            np.array_equal(getattr(a.crystal, f), getattr(b.crystal, f))
            for f in ("node_features", "src", "dst", "displacements")
        )
    if a.dos is not None:
        same &= np.array_equal(a.dos.energies, b.dos.energies) and np.array_equal(a.dos.values, b.dos.values)
    if a.density is not None:
        same &= np.array_equal(a.density.voxels, b.density.voxels)
    return bool(same)


def test_generation_is_deterministic():
    assert records_equal(S.generate_material(11), S.generate_material(11))
    assert not np.array_equal(S.generate_material(11).latent, S.generate_material(12).latent)


def test_distinct_ids():
    ids = {S.generate_material(s).id for s in range(1, 1001)}
    assert len(ids) == 1000


def test_gap_tracks_first_latent():
    data = S.generate_dataset(1000, seed=3)
    gap = np.array([r.properties["gap"] for r in data])
    z0 = np.array([r.latent[0] for r in data])
    assert abs(np.corrcoef(gap, z0)[0, 1]) > 0.5


def test_payload_invariants():
    spec = S.GeneratorSpec()
    for seed in range(30):
        r = S.generate_material(seed)
        assert r.modalities == frozenset(S.MODALITIES)
        assert np.all(np.diff(r.dos.energies) > 0) and np.all(r.dos.values >= 0)
        assert r.dos.energies[0] <= -5 and r.dos.energies[-1] >= 5
        assert r.dos.energies[0] >= -10 and r.dos.energies[-1] <= 10
        assert r.density.grid_size == spec.grid_size
        assert r.crystal.node_features.shape[1] == spec.node_dim
        assert set(r.properties) >= {"gap", "formation_energy"}


def test_latent_properties_formula():
    z = np.array([0.3, -0.2, 0.5, 1.1, 0, 0, 0, 0])
    x = 1.5 * 0.3 + 0.5 * np.sin(-0.4) + 0.3 * 0.5 * 1.1
    assert S.latent_properties(z)["gap"] == pytest.approx(np.log1p(np.exp(x)), rel=1e-12)


def test_dropout_keeps_one_modality():
    spec = S.GeneratorSpec(modality_dropout=0.6)
    counts = S.materials_by_modality([S.generate_material(s, spec) for s in range(200)])
    assert len(counts) > 1 and frozenset() not in counts


def test_dropout_does_not_shift_other_modalities():
    for seed in range(5, 15):
        full = S.generate_material(seed)
        partial = S.generate_material(seed, S.GeneratorSpec(modality_dropout=0.6))
        kept = S.MaterialRecord(full.id, full.latent, *(getattr(full, m) if m in partial.modalities else None for m in S.MODALITIES), properties=full.properties)
        assert records_equal(partial, kept)


def _stub(i, mods):
    r = S.generate_material(i)
    return S.MaterialRecord(
        r.id, r.latent, *(getattr(r, m) if m in mods else None for m in S.MODALITIES), properties=r.properties
    )


def test_intersect():
    recs = [_stub(1, {"crystal", "dos"}), _stub(2, {"crystal", "dos", "density"}), _stub(3, {"crystal", "density"})]
    full = S.intersect_datasets(recs, {"crystal", "dos", "density"})
    assert full.ids == ["syn-2"]
    assert S.intersect_datasets(recs, set()).ids == ["syn-1", "syn-2", "syn-3"]
    cd = S.intersect_datasets(recs, {"crystal", "dos"})
    assert cd.ids == ["syn-1", "syn-2"]
    assert S.intersect_datasets(cd, {"crystal"}).ids == cd.ids
    assert S.intersect_datasets(S.intersect_datasets(recs, {"crystal"}), {"crystal"}).ids == ["syn-1", "syn-2", "syn-3"]
    with pytest.raises(ValueError):
        S.intersect_datasets(recs, {"xrd"})


@pytest.mark.parametrize("n, expected", [(10, (6, 2, 2)), (5, (3, 1, 1)), (2000, (1200, 400, 400))])
def test_split_sizes(n, expected):
    assert S.split_sizes(n, S.SplitSpec()) == expected


def test_split_partition_and_determinism():
    data = S.generate_dataset(23, seed=1)
    tr, va, te = S.split_dataset(data, S.SplitSpec(seed=4))
    assert (len(tr), len(va), len(te)) == (15, 4, 4)
    all_ids = tr.ids + va.ids + te.ids
    assert sorted(all_ids) == sorted(data.ids) and len(set(all_ids)) == 23
    again = S.split_dataset(data, S.SplitSpec(seed=4))
    assert [x.ids for x in again] == [tr.ids, va.ids, te.ids]
    assert S.split_dataset(data, S.SplitSpec(seed=5))[0].ids != tr.ids


def test_split_errors():
    with pytest.raises(EmptyDatasetError):
        S.split_dataset(S.Dataset([]))
    with pytest.raises(ValueError):
        S.SplitSpec(0.5, 0.3, 0.3)
    with pytest.raises(ValueError):
        S.SplitSpec(1.0, 0.0, 0.0)


def test_dataset_round_trip(tmp_path):
    data = S.generate_dataset(6, seed=2)
    S.write_dataset(data, tmp_path / "a")
    back = S.read_dataset(tmp_path / "a")
    assert back.ids == data.ids and back.modality_mask == frozenset(S.MODALITIES)
    for a, b in zip(data, back):
        assert records_equal(a, b)
    S.write_dataset(back, tmp_path / "b")
    assert filecmp.cmp(tmp_path / "a" / "dataset.jsonl", tmp_path / "b" / "dataset.jsonl", shallow=False)


def test_dataset_line_fields(tmp_path):
    import json

    S.write_dataset(S.generate_dataset(1), tmp_path)
    obj = json.loads((tmp_path / "dataset.jsonl").read_text().splitlines()[0])
    assert {"id", "crystal", "dos", "density_ref", "properties"} <= set(obj)
    assert set(obj["dos"]) == {"energies", "values"}


def test_voxel_header(tmp_path):
    g = S.generate_material(0).density
    S.write_voxels(tmp_path / "v.mmv", g)
    raw = (tmp_path / "v.mmv").read_bytes()
    assert raw[:4] == b"MMV1" and struct.unpack("<I", raw[4:8])[0] == g.grid_size and raw[8:16] == bytes(8)
    assert len(raw) == 16 + 4 * g.grid_size**3
    np.testing.assert_array_equal(S.read_voxels(tmp_path / "v.mmv").voxels, g.voxels)


def test_bad_files(tmp_path):
    (tmp_path / "x.mmv").write_bytes(b"nope")
    with pytest.raises(FormatError):
        S.read_voxels(tmp_path / "x.mmv")
    (tmp_path / "dataset.jsonl").write_text('{"id": "a", "dos": {"energies": [1, 0], "values": [0, 0]}}\n')
    with pytest.raises(FormatError):
        S.read_dataset(tmp_path)


def test_spec_text_round_trip():
    spec = S.GeneratorSpec(latent_dim=10, modality_dropout=0.25)
    assert S.parse_generator_spec(S.format_generator_spec(spec)) == spec
    assert S.parse_generator_spec("# comment\n\ngrid_size = 8\n").grid_size == 8


@pytest.mark.parametrize(
    "text",
    ["grid_size 8", "colour = red", "grid_size = eight", "grid_size = 0", "modality_dropout = 1.0", "latent_dim = 3"],
)
def test_spec_errors(text):
    with pytest.raises(BadSpecError):
        S.parse_generator_spec(text)


def test_negative_count():
    with pytest.raises(BadSpecError):
        S.generate_dataset(-1)


def test_load_dos_json(tmp_path):
    p = tmp_path / "t.json"
    p.write_text('{"energies": [-6, 0, 6], "values": [1, 2, 1]}')
    np.testing.assert_array_equal(S.load_dos_json(p).values, [1, 2, 1])
