import json

import numpy as np
import pytest

from pdepth import store
from pdepth.mlp import EmbeddingTrace, init_model


class TestBinaryFormats:
    def test_model_roundtrip(self):
        m = init_model((5, 7, 3), 4)
        back = store.decode_model(store.encode_model(m))
        assert back.widths == m.widths
        assert all(np.array_equal(a, b) for a, b in zip(back.parameters(), m.parameters()))

    def test_model_header(self):
        buf = store.encode_model(init_model((2, 3), 0))
        assert buf[:6] == b"PDMLP1"
        assert int.from_bytes(buf[6:8], "little") == store.MODEL_VERSION

    def test_model_truncated(self):
        buf = store.encode_model(init_model((2, 3), 0))
        with pytest.raises(store.FormatError):
            store.decode_model(buf[:-3])

    def test_model_bad_magic(self):
        with pytest.raises(store.FormatError):
            store.decode_model(b"XXXXXX" + store.encode_model(init_model((2, 3), 0))[6:])

    def test_trace_roundtrip(self, rng):
        t = EmbeddingTrace([rng.normal(size=(4, 3)).astype(np.float32), np.zeros((4, 1), np.float32)])
        back = store.decode_trace(store.encode_trace(t))
        assert len(back) == 2
        assert all(np.array_equal(a, b) for a, b in zip(back.probes, t.probes))

    def test_trace_truncated(self, rng):
        t = EmbeddingTrace([rng.normal(size=(4, 3)).astype(np.float32)])
        with pytest.raises(store.FormatError):
            store.decode_trace(store.encode_trace(t)[:-1])


class TestTextFormats:
    def test_canonical_json_sorted_and_stable(self):
        a = store.canonical_json({"b": 1, "a": [0.1, float("nan")]})
        b = store.canonical_json({"a": [0.1, float("nan")], "b": 1})
        assert a == b
        assert a.index(b'"a"') < a.index(b'"b"')
        assert json.loads(a)["a"][0] == pytest.approx(0.1, rel=1e-16)

    def test_csv_roundtrip(self):
        buf = store.csv_bytes(["x", "y"], [[1, 0.1], [True, float("nan")]])
        header, rows = store.read_csv(buf)
        assert header == ["x", "y"]
        assert rows == [["1", "0.1"], ["1", "nan"]]
        assert float(rows[0][1]) == 0.1

    def test_int_matrix_same_bytes(self, rng):
        m = rng.integers(0, 9, size=(4, 6))
        lead = np.arange(4) * 10
        assert store.int_matrix_csv_bytes(["s"] + list("abcdef"), lead, m) == store.csv_bytes(
            ["s"] + list("abcdef"), [[a] + list(r) for a, r in zip(lead, m)])


class TestRunDirectory:
    @pytest.fixture
    def run(self, tmp_path):
        manifest = {"kind": "test", "base_seed": 3}
        artifacts = {"models/0.pdmlp": store.encode_model(init_model((2, 2), 0)),
                     "embeddings/0.pdemb": store.encode_trace(EmbeddingTrace([np.ones((2, 2), np.float32)])),
                     "metrics/a.csv": b"x\n1\n"}
        store.write_run(tmp_path, manifest, artifacts)
        return tmp_path, manifest, artifacts

    def test_round_trip(self, run):
        root, manifest, artifacts = run
        got, files = store.read_run(root)
        assert got["kind"] == "test" and got["schema_version"] == store.SCHEMA_VERSION
        assert {k: files[k] for k in files} == artifacts
        assert store.verify_run(root).ok

    def test_truncated_embedding_named(self, run):
        root, _, _ = run
        p = root / "embeddings/0.pdemb"
        p.write_bytes(p.read_bytes()[:-2])
        report = store.verify_run(root)
        assert report.mismatched == ["embeddings/0.pdemb"]
        assert not report.missing and not report.ok

    def test_missing_named(self, run):
        root, _, _ = run
        (root / "metrics/a.csv").unlink()
        report = store.verify_run(root)
        assert report.missing == ["metrics/a.csv"]
        with pytest.raises(store.MissingArtifact):
            store.read_run(root)[1]["metrics/a.csv"]

    def test_digest_error_on_read(self, run):
        root, _, _ = run
        (root / "metrics/a.csv").write_bytes(b"x\n2\n")
        with pytest.raises(store.DigestMismatch):
            store.read_run(root)[1]["metrics/a.csv"]

    def test_schema_version(self, run):
        root, _, _ = run
        path = root / "manifest.json"
        data = json.loads(path.read_bytes())
        data["schema_version"] += 1
        path.write_text(json.dumps(data))
        with pytest.raises(store.SchemaVersionError):
            store.read_run(root)
        assert not store.verify_run(root).ok

    def test_errors_are_distinct(self):
        kinds = {store.MissingArtifact, store.DigestMismatch, store.SchemaVersionError}
        assert len(kinds) == 3 and all(issubclass(k, store.RunStoreError) for k in kinds)
