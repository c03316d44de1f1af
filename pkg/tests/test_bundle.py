import numpy as np
import pytest

from conftest import make_backbone, make_model, make_table, randomize_adapter
from e4srec.bundle import closed_form_param_count, export_bundle, import_bundle, read_bundle
from e4srec.errors import BundleCorruptError, IncompatibleBundleError


@pytest.fixture()
def trained(backbone):
    model = make_model(backbone)
    randomize_adapter(model)
    return model


def test_round_trip_is_bitwise(tmp_path, backbone, trained):
    path = tmp_path / "m.e4sb"
    export_bundle(trained, path)
    again = import_bundle(path, backbone)
    assert np.array_equal(again.E.data, trained.E.data)
    assert np.array_equal(again.w_in.data, trained.w_in.data)
    assert np.array_equal(again.w_out.data, trained.w_out.data)
    assert again.adapter.module_names == trained.adapter.module_names
    for name in trained.adapter.module_names:
        assert np.array_equal(again.adapter.A[name].data, trained.adapter.A[name].data)
        assert np.array_equal(again.adapter.B[name].data, trained.adapter.B[name].data)
    assert again.embeddings.provenance == "sasrec"
    rng = np.random.default_rng(0)
    for _ in range(10):
        hist = rng.integers(0, 20, size=int(rng.integers(1, 12))).tolist()
        assert np.array_equal(again.predict_scores(hist), trained.predict_scores(hist))


def test_param_count_matches_closed_form(tmp_path, backbone, trained):
    summary = export_bundle(trained, tmp_path / "m.e4sb")
    projections = [backbone.arrays[n].shape for n in trained.adapter.module_names]
    expected = closed_form_param_count(20, 8, backbone.config.dim, 4, projections)
    assert summary["param_count"] == expected == read_bundle(tmp_path / "m.e4sb").param_count()
    assert summary["ratio_to_backbone"] == pytest.approx(expected / backbone.param_count())


def test_header_fields(tmp_path, trained):
    export_bundle(trained, tmp_path / "m.e4sb")
    raw = (tmp_path / "m.e4sb").read_bytes()
    assert raw[:4] == b"E4SB"
    assert np.frombuffer(raw[4:32], dtype="<u4").tolist() == [1, 20, 8, 32, 4, 8, 6]  # 2 layers x 3 targets
    b = read_bundle(tmp_path / "m.e4sb")
    assert b.targets == trained.adapter.module_names
    assert b.targets[0] == "layers.0.mlp.gate_proj"


def test_corrupted_byte_rejected(tmp_path, backbone, trained):
    path = tmp_path / "m.e4sb"
    export_bundle(trained, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x40
    path.write_bytes(bytes(raw))
    with pytest.raises(BundleCorruptError, match="checksum"):
        import_bundle(path, backbone)


def test_truncated_file_rejected(tmp_path, backbone, trained):
    path = tmp_path / "m.e4sb"
    export_bundle(trained, path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(BundleCorruptError):
        import_bundle(path, backbone)


def test_dk_mismatch_names_both_dims(tmp_path, trained):
    path = tmp_path / "m.e4sb"
    export_bundle(trained, path)
    wide = make_backbone(dim=64)
    with pytest.raises(IncompatibleBundleError, match="d_k=32.*d_k=64"):
        import_bundle(path, wide)


def test_no_llm_and_bpr_bundles(tmp_path, backbone):
    model = make_model(backbone, table=make_table(provenance="bpr"), no_llm=True)
    export_bundle(model, tmp_path / "n.e4sb")
    again = import_bundle(tmp_path / "n.e4sb", backbone)
    assert again.no_llm and again.embeddings.provenance == "bpr"
    assert np.array_equal(again.predict_scores([1, 2, 3]), model.predict_scores([1, 2, 3]))
