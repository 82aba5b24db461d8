"""Tests for mpmflow.manifest module."""

import hashlib

import pytest

from mpmflow.manifest import (
    MANIFEST_NAME,
    ConfigFileError,
    RunManifest,
    read_jsonc,
    strip_jsonc_comments,
)


class TestJsonc:
    """Tests for JSON-with-comments reading."""

    def test_full_line_comments(self, tmp_path):
        """Test // lines are ignored."""
        path = tmp_path / "a.json"
        path.write_text('// header\n{\n  // note\n  "a": 1\n}\n')
        assert read_jsonc(path) == {"a": 1}

    def test_urls_in_strings_survive(self):
        """Test only whole-line comments are stripped."""
        text = '{"url": "http://example.org"}'
        assert strip_jsonc_comments(text) == text

    def test_error_names_line(self, tmp_path):
        """Test syntax errors report path, line and column."""
        path = tmp_path / "bad.json"
        path.write_text('// comment\n{\n  "a": 1,\n}\n')
        with pytest.raises(ConfigFileError, match=r"bad.json:4:"):
            read_jsonc(path)

    def test_missing_file(self, tmp_path):
        """Test a missing file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            read_jsonc(tmp_path / "nope.json")


class TestRunManifest:
    """Tests for RunManifest."""

    def test_new_records_versions(self):
        """Test a new manifest carries id and library versions."""
        manifest = RunManifest.new("simulate", seed=3, config={"dt": 1e-4})
        assert manifest.run_id.startswith("run_")
        assert manifest.status == "running"
        assert {"mpmflow", "numpy", "pydantic", "python"} <= set(manifest.versions)

    def test_input_hash(self, tmp_path):
        """Test inputs are recorded by SHA-256."""
        path = tmp_path / "scene.json"
        path.write_bytes(b"{}")
        manifest = RunManifest.new("simulate")
        digest = manifest.add_input(path)
        assert digest == hashlib.sha256(b"{}").hexdigest()
        assert manifest.inputs[str(path)] == digest

    def test_save_and_load(self, tmp_path):
        """Test manifests survive a save/load cycle."""
        manifest = RunManifest.new("identify", seed=1, config={"iters": 5})
        manifest.add_output(tmp_path / "report.json")
        manifest.finish("ok")
        path = manifest.save(tmp_path)
        assert path.name == MANIFEST_NAME
        loaded = RunManifest.load(tmp_path)
        assert loaded.to_dict() == manifest.to_dict()
        assert loaded.finished_at is not None
