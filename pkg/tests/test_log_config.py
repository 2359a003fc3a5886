import logging
import sys
import threading

from log_config import ColoredFormatter, current_round, round_tag, set_round


def _record(name="federation"):
    return logging.LogRecord(name, logging.INFO, __file__, 1, "round closed", None, None)


def test_round_tag():
    formatter = ColoredFormatter(fmt="%(message)s")
    set_round(0)
    assert "Init" in formatter.format(_record())
    set_round(7)
    line = formatter.format(_record())
    assert "Round:7" in line and "round closed" in line
    set_round(0)


def test_round_is_thread_local():
    set_round(3)
    seen = []
    worker = threading.Thread(target=lambda: seen.append(current_round()))
    worker.start()
    worker.join()
    assert seen == [0]
    assert current_round() == 3
    set_round(0)


def test_round_tag_helper():
    set_round(0)
    assert "Init" in round_tag()
    set_round(12)
    assert "Round:12" in round_tag()
    set_round(0)


def test_exception_text_follows_message():
    formatter = ColoredFormatter()
    try:
        raise RuntimeError("boom")
    except RuntimeError:
        record = logging.LogRecord("main", logging.ERROR, __file__, 1, "run failed", None, sys.exc_info())
    line = formatter.format(record)
    assert line.index("run failed") < line.index("RuntimeError: boom")
