"""Tests for file and logging helpers."""
import hashlib
import logging

import pytest

from utils import io_utils
from utils.io_utils import ensure_dir, read_json, sha256_file, write_json
from utils.logging_utils import format_fields, get_logger, set_level


class TestJson:
    def test_sorted_keys_and_newline(self, tmp_path) -> None:
        path = write_json(tmp_path / "nested" / "out.json", {"b": 1, "a": [1.5]})
        text = path.read_text(encoding="utf-8")
        assert text.index('"a"') < text.index('"b"')
        assert text.endswith("\n")
        assert read_json(path) == {"a": [1.5], "b": 1}

    def test_missing_file(self, tmp_path) -> None:
        with pytest.raises(FileNotFoundError):
            read_json(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path) -> None:
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ValueError):
            read_json(path)


class TestFiles:
    def test_digest(self, tmp_path) -> None:
        path = tmp_path / "data.bin"
        path.write_bytes(b"occupied")
        assert sha256_file(path) == hashlib.sha256(b"occupied").hexdigest()

    def test_module_describes_file_helpers(self) -> None:
        assert io_utils.__doc__.startswith("File helpers")

    def test_ensure_dir_idempotent(self, tmp_path) -> None:
        first = ensure_dir(tmp_path / "a" / "b")
        assert ensure_dir(first) == first
        assert first.is_dir()


class TestLogging:
    def test_format_fields(self) -> None:
        assert format_fields(paths=512, loss=0.0123456789, spec="tanh") == "paths=512 loss=0.0123457 spec=tanh"

    def test_logger_cached(self) -> None:
        assert get_logger("lov.test") is get_logger("lov.test")

    def test_set_level(self) -> None:
        logger = get_logger("lov.level")
        set_level(logging.DEBUG)
        assert logger.level == logging.DEBUG
        set_level(logging.INFO)
        assert logger.level == logging.INFO
