import threading

import pytest

from errors import UsageError
from workers import THREADS_ENV, parallel_map, parallel_map_reduce, thread_count


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert thread_count() == 1
    monkeypatch.setenv(THREADS_ENV, "4")
    assert thread_count() == 4


@pytest.mark.parametrize("value", ["zero", "0", "-2"])
def test_bad_thread_count_is_a_usage_error(monkeypatch, value):
    monkeypatch.setenv(THREADS_ENV, value)
    with pytest.raises(UsageError):
        thread_count()


def test_parallel_map_keeps_item_order():
    items = list(range(50))
    assert parallel_map(lambda x: x * x, items, num_threads=4) == [x * x for x in items]


def test_parallel_map_serial_runs_on_calling_thread():
    caller = threading.get_ident()
    seen = parallel_map(lambda _: threading.get_ident(), range(3), num_threads=1)
    assert seen == [caller] * 3


def test_parallel_map_propagates_errors():
    def boom(x):
        if x == 3:
            raise ValueError("bad item")
        return x

    with pytest.raises(ValueError):
        parallel_map(boom, range(6), num_threads=3)


@pytest.mark.parametrize("num_threads", [1, 3, 4, 10])
def test_map_reduce_matches_serial_sum(num_threads):
    items = list(range(1, 101))
    total = parallel_map_reduce(items, lambda chunk: sum(chunk), sum, num_threads=num_threads)
    assert total == sum(items)


def test_map_reduce_keeps_chunk_order():
    items = list("abcdefg")
    joined = parallel_map_reduce(items, lambda chunk: "".join(chunk), "".join, num_threads=3)
    assert joined == "abcdefg"
