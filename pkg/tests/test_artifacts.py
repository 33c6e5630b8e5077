"""
Artifact helper tests
Run: pytest tests/test_artifacts.py -v
"""
import pytest

import artifacts


class TestArtifacts:
    """File helpers behind corpora, logs and history files."""

    def test_public_helpers(self):
        """Only the helpers the CLI, trainer and harness call are exported."""
        public = {name for name in vars(artifacts) if not name.startswith("_") and callable(getattr(artifacts, name))}
        helpers = public - {"Any", "Dict", "Iterable", "Iterator", "List", "Path", "Sequence"}
        assert helpers == {
            "slugify", "atomic_write_json", "atomic_write_text", "read_json",
            "append_jsonl", "iter_jsonl", "list_files", "write_csv", "read_csv",
        }

    def test_slugify(self):
        """Script ids become safe file stems."""
        assert artifacts.slugify("FSA / Shrimp #1") == "fsa-shrimp-1"
        assert artifacts.slugify("  ") == "run"

    def test_atomic_json_round_trip(self, tmp_path):
        """Writes create parent directories and leave no temp files behind."""
        path = tmp_path / "deep" / "params.json"
        artifacts.atomic_write_json(path, {"rows": [1, 2]})
        assert artifacts.read_json(path) == {"rows": [1, 2]}
        assert [p.name for p in path.parent.iterdir()] == ["params.json"]

    def test_jsonl_append_and_bad_line(self, tmp_path):
        """Appended records read back in order; a broken line names its number."""
        path = tmp_path / "log.jsonl"
        artifacts.append_jsonl(path, [{"a": 1}])
        artifacts.append_jsonl(path, [{"a": 2}])
        assert [r["a"] for r in artifacts.iter_jsonl(path)] == [1, 2]
        with open(path, "a", encoding="utf-8") as f:
            f.write("{oops\n")
        with pytest.raises(ValueError, match=":3:"):
            list(artifacts.iter_jsonl(path))
