import pytest

from spectrelab.cache import (Cache, CacheConfig, CacheConfigError,
                              PageAliasTable, classify)


def test_cold_miss_then_hit():
    cache = Cache()
    hit, latency = cache.access(0)
    assert (hit, latency) == (False, 300)
    hit, latency = cache.access(0)
    assert (hit, latency) == (True, 40)


def test_lru_eviction_in_one_set():
    cache = Cache()   # 64 sets, 8 ways, 64-byte lines: stride 4096 stays in one set
    for i in range(9):
        cache.access(i * 4096)
    hit, _ = cache.access(0)          # line 0 was least recently used
    assert hit is False
    hit, _ = cache.access(8 * 4096)   # newest survives
    assert hit is True


def test_lru_promotion_on_hit():
    cache = Cache()
    for i in range(8):
        cache.access(i * 4096)
    cache.access(0)                   # promote the oldest
    cache.access(8 * 4096)            # evicts line 1, not line 0
    assert cache.contains(0)
    assert not cache.contains(4096)


def test_flush_idempotent():
    cache = Cache()
    cache.access(128)
    cache.flush(128)
    hit, _ = cache.access(128)
    assert hit is False
    cache.flush(9999)      # never accessed: no-op
    cache.flush(9999)


def test_flush_is_line_granular():
    cache = Cache()
    cache.access(256)
    cache.flush(256 + 63)   # same 64-byte line
    hit, _ = cache.access(256)
    assert hit is False


def test_classify():
    cfg = CacheConfig()
    assert classify(40, 150, cfg) is True
    assert classify(300, 150, cfg) is False
    with pytest.raises(CacheConfigError):
        classify(40, 40, cfg)     # not strictly between
    with pytest.raises(CacheConfigError):
        classify(40, 300, cfg)


def test_deterministic_replay():
    sequence = [0, 64, 4096, 0, 8192, 64]
    runs = []
    for _ in range(2):
        cache = Cache()
        runs.append([cache.access(a) for a in sequence])
    assert runs[0] == runs[1]


def test_seeded_jitter_reproducible():
    cfg = CacheConfig(jitter=5, jitter_seed=77)
    a = [Cache(cfg).access(i * 64)[1] for i in range(20)]
    b = [Cache(cfg).access(i * 64)[1] for i in range(20)]
    assert a == b
    assert any(latency != 300 for latency in a)
    assert all(295 <= latency <= 305 for latency in a)


def test_config_validation():
    with pytest.raises(CacheConfigError):
        CacheConfig(sets=60)
    with pytest.raises(CacheConfigError):
        CacheConfig(hit_latency=100, miss_latency=100)


def test_alias_table_translation():
    table = PageAliasTable()
    assert table.translate(4096 + 5) == 4096 + 5
    table.alias(1, 9)
    assert table.translate(4096 + 5) == 9 * 4096 + 5
    assert table.translate(5) == 5


def test_aliased_pages_share_lines():
    cache = Cache()
    cache.aliases.alias(1, 9)
    cache.access(9 * 4096)         # receiver touches its own frame
    hit, _ = cache.access(4096)    # victim page aliases onto it
    assert hit is True
