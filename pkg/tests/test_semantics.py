import numpy as np
import pytest
import hypothesis as h
import hypothesis.strategies as st

from tokenseg.semantics import (
    CannedMllmClient,
    EmbeddingFileError,
    EncodingError,
    MockTextEncoder,
    ReportSchemaError,
    SemanticReport,
    TransportError,
    REPORT_FIELDS,
    SENTENCE_TEMPLATES,
    build_sentences,
    encode_report,
    load_prompt_template,
    make_visual_triplet,
    mllm_generate,
    parse_report,
    read_embedding,
    write_embedding,
)


def sample_report(**overrides) -> SemanticReport:
    values = {
        "morphology": "irregular, taller-than-wide",
        "margin_definition": "poorly defined and angular",
        "internal_texture": "heterogeneous with scattered echoes",
        "surrounding_interaction": "architectural distortion of adjacent tissue",
        "boundary_distinctness": "low contrast against the background",
        "malignancy_risk": "intermediate",
        "pathological_inference": "dense fibrous core",
        "differential_reasoning": "lacks the smooth capsule of a benign nodule",
        "predicted_diagnosis": "suspicious solid lesion",
    }
    values.update(overrides)
    return SemanticReport(**values)


class TestSentences:
    def test_first_template_rendering(self):
        s = build_sentences(sample_report())
        assert s[0] == (
            "The geometric shape and orientation of the lesion is irregular, taller-than-wide"
        )

    def test_one_sentence_per_dimension(self):
        s = build_sentences(sample_report())
        assert len(s) == len(REPORT_FIELDS) == len(SENTENCE_TEMPLATES) == 9

    def test_each_sentence_contains_its_value(self):
        rep = sample_report()
        for sentence, value in zip(build_sentences(rep), rep.values()):
            assert sentence.endswith(value)

    def test_empty_field_rejected(self):
        with pytest.raises(ReportSchemaError, match="malignancy_risk"):
            build_sentences(sample_report(malignancy_risk="  "))


class TestParseReport:
    def test_roundtrip(self):
        rep = sample_report()
        assert parse_report(rep.to_json_dict()) == rep

    def test_extra_keys_tolerated(self):
        d = sample_report().to_json_dict()
        d["confidence"] = "high"
        assert parse_report(d) == sample_report()

    def test_missing_key_named(self):
        d = sample_report().to_json_dict()
        del d["predicted_diagnosis"]
        with pytest.raises(ReportSchemaError, match="predicted_diagnosis"):
            parse_report(d)

    def test_not_json(self):
        with pytest.raises(ReportSchemaError):
            parse_report("certainly! here is the report: ...")


class TestMockEncoder:
    def test_deterministic(self):
        enc = MockTextEncoder(64)
        a = enc.encode("a sentence")
        b = enc.encode("a sentence")
        np.testing.assert_array_equal(a, b)
        assert a.dtype == np.float32

    def test_unit_norm(self):
        enc = MockTextEncoder(768)
        assert np.linalg.norm(enc.encode("x")) == pytest.approx(1.0, abs=1e-6)

    def test_distinct_sentences_nearly_orthogonal(self):
        enc = MockTextEncoder(768)
        rows = [enc.encode(f"sentence number {i}") for i in range(12)]
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                assert abs(float(rows[i] @ rows[j])) < 0.3


class TestEncodeReport:
    def test_shape_and_determinism(self):
        enc = MockTextEncoder(96)
        m1 = encode_report(sample_report(), enc)
        m2 = encode_report(sample_report(), enc)
        assert m1.shape == (9, 96)
        np.testing.assert_array_equal(m1, m2)

    def test_single_field_changes_single_row(self):
        enc = MockTextEncoder(64)
        base = encode_report(sample_report(), enc)
        other = encode_report(
            sample_report(boundary_distinctness="sharply demarcated"), enc
        )
        changed = [i for i in range(9) if not np.array_equal(base[i], other[i])]
        assert changed == [REPORT_FIELDS.index("boundary_distinctness")]

    def test_encoder_failure_carries_dimension(self):
        class Broken:
            name = "broken"
            dim = 8

            def __init__(self):
                self.n = 0

            def encode(self, sentence):
                self.n += 1
                if self.n == 4:
                    raise RuntimeError("boom")
                return np.zeros(8, dtype=np.float32)

        with pytest.raises(EncodingError) as ei:
            encode_report(sample_report(), Broken())
        assert ei.value.dimension_index == 3


class TestEmbeddingFile:
    @h.given(
        rows=st.integers(min_value=1, max_value=12),
        cols=st.sampled_from([16, 768]),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    def test_roundtrip_bit_exact(self, rows, cols, seed):
        import tempfile
        from pathlib import Path

        m = np.random.default_rng(seed).standard_normal((rows, cols)).astype(np.float32)
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "e.c2pe"
            write_embedding(p, m)
            back = read_embedding(p)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, m)

    def test_header_layout(self, tmp_path):
        p = tmp_path / "e.c2pe"
        write_embedding(p, np.zeros((2, 3), dtype=np.float32))
        raw = p.read_bytes()
        assert raw[:4] == b"C2PE"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:16], "little") == 3
        assert len(raw) == 16 + 4 * 6

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "e.c2pe"
        write_embedding(p, np.zeros((1, 4), dtype=np.float32))
        data = bytearray(p.read_bytes())
        data[:4] = b"NOPE"
        p.write_bytes(bytes(data))
        with pytest.raises(EmbeddingFileError, match="magic"):
            read_embedding(p)

    def test_truncation(self, tmp_path):
        p = tmp_path / "e.c2pe"
        write_embedding(p, np.ones((3, 5), dtype=np.float32))
        p.write_bytes(p.read_bytes()[:-7])
        with pytest.raises(EmbeddingFileError, match="truncated"):
            read_embedding(p)

    def test_trailing_garbage(self, tmp_path):
        p = tmp_path / "e.c2pe"
        write_embedding(p, np.ones((1, 2), dtype=np.float32))
        p.write_bytes(p.read_bytes() + b"xx")
        with pytest.raises(EmbeddingFileError, match="trailing"):
            read_embedding(p)


class TestMllmGenerate:
    def triplet(self):
        img = np.zeros((16, 16), dtype=np.float32)
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:10, 5:12] = 1
        return make_visual_triplet(img, mask)

    def test_happy_path(self):
        import json

        client = CannedMllmClient([json.dumps(sample_report().to_json_dict())])
        rep = mllm_generate(self.triplet(), "prompt", client)
        assert rep == sample_report()

    def test_retries_then_succeeds(self):
        import json

        client = CannedMllmClient(
            ["not json at all", json.dumps(sample_report().to_json_dict())]
        )
        rep = mllm_generate(self.triplet(), "prompt", client, max_retries=2)
        assert rep == sample_report()
        assert client.calls == 2

    def test_schema_error_after_retries(self):
        import json

        d = sample_report().to_json_dict()
        del d["predicted_diagnosis"]
        client = CannedMllmClient([json.dumps(d)] * 3)
        with pytest.raises(ReportSchemaError, match="predicted_diagnosis"):
            mllm_generate(self.triplet(), "prompt", client, max_retries=2)
        assert client.calls == 3

    def test_transport_error_propagates(self):
        class Down:
            def generate(self, images, prompt):
                raise TransportError("endpoint unreachable")

        with pytest.raises(TransportError):
            mllm_generate(self.triplet(), "prompt", Down())


class TestTripletAndPrompt:
    def test_triplet_annotation_on_ring_only(self):
        img = np.full((32, 32), 0.25, dtype=np.float32)
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[8:24, 8:24] = 1
        raw, annotated, m = make_visual_triplet(img, mask)
        np.testing.assert_array_equal(raw, img)
        np.testing.assert_array_equal(m, mask.astype(np.float32))
        painted = annotated == 1.0
        assert painted.any()
        # far inside and far outside stay untouched
        assert annotated[15, 15] == 0.25
        assert annotated[2, 2] == 0.25

    def test_prompt_template_fill(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("{ROLE} / {IMAGE_MODE} / keep {these} braces", encoding="utf-8")
        out = load_prompt_template(p, {"ROLE": "r", "IMAGE_MODE": "m"})
        assert out == "r / m / keep {these} braces"

    def test_prompt_template_missing_slot(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("{ROLE} {CONTEXT}", encoding="utf-8")
        with pytest.raises(KeyError, match="CONTEXT"):
            load_prompt_template(p, {"ROLE": "r"})

    def test_packaged_template_fills(self):
        import json
        from importlib.resources import files

        root = files("tokenseg") / "prompts"
        slots = json.loads((root / "synthetic_shapes.json").read_text(encoding="utf-8"))
        with pytest.raises(KeyError):
            load_prompt_template(str(root / "report_prompt.txt"), {})
        text = load_prompt_template(str(root / "report_prompt.txt"), slots)
        assert "{ROLE}" not in text and "{CONTEXT}" not in text
        assert '"predicted_diagnosis"' in text
