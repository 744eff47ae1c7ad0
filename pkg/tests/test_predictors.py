import collections
import random

import pytest

from spectrelab.predictors import Btb, Pht, Rsb


class TestPht:
    def test_fresh_predicts_not_taken(self):
        assert Pht().predict(0) is False

    def test_two_taken_updates_flip_prediction(self):
        pht = Pht()
        pht.update(7, True)
        pht.update(7, True)
        assert pht.predict(7) is True   # 1 -> 2 -> 3, threshold 2

    def test_alternating_ends_not_taken(self):
        pht = Pht()
        for _ in range(5):
            pht.update(3, True)    # 1 -> 2
            pht.update(3, False)   # 2 -> 1
        assert pht.table[3] == 1
        assert pht.predict(3) is False

    def test_saturation(self):
        pht = Pht()
        pht.table[4] = 3
        pht.update(4, True)
        assert pht.table[4] == 3
        pht.table[5] = 0
        pht.update(5, False)
        assert pht.table[5] == 0
        pht.table[6] = 1
        pht.update(6, True)
        pht.update(6, True)
        assert pht.table[6] == 3

    def test_counters_bounded_under_fuzz(self):
        pht = Pht(size=64)
        rng = random.Random(5)
        for _ in range(100_000):
            pht.update(rng.randrange(1 << 20), rng.random() < 0.5)
            # spot check a random counter each step
            assert 0 <= pht.table[rng.randrange(64)] <= 3

    def test_size_must_be_power_of_two(self):
        with pytest.raises(ValueError):
            Pht(size=100)


class TestBtb:
    def test_empty_predicts_nothing(self):
        assert Btb().predict(7) is None

    def test_update_then_predict(self):
        btb = Btb()
        btb.update(7, 42)
        assert btb.predict(7) == 42

    def test_aliasing_site_evicts(self):
        btb = Btb(entries=256)
        btb.update(7, 42)
        btb.update(7 + 256, 99)       # same slot, different tag
        assert btb.predict(7) is None
        assert btb.predict(7 + 256) == 99

    def test_last_update_wins(self):
        btb = Btb()
        btb.update(7, 42)
        btb.update(7, 43)
        assert btb.predict(7) == 43

    def test_non_aliasing_site_unaffected(self):
        btb = Btb()
        btb.update(7, 42)
        assert btb.predict(8) is None

    def test_predict_after_update_absent_aliasing(self):
        rng = random.Random(9)
        btb = Btb(entries=64)
        model = {}
        for _ in range(5000):
            site = rng.randrange(1 << 12)
            target = rng.randrange(1 << 10)
            btb.update(site, target)
            model[site] = target
            # evict anything the direct-mapped slot displaced
            for other in list(model):
                if other != site and other % 64 == site % 64:
                    del model[other]
            probe = rng.choice(list(model))
            assert btb.predict(probe) == model[probe]


class TestRsb:
    def test_lifo(self):
        rsb = Rsb()
        rsb.push(10)
        rsb.push(20)
        assert rsb.pop() == 20
        assert rsb.pop() == 10

    def test_pop_on_empty(self):
        assert Rsb().pop() is None

    def test_circular_overwrite_drops_oldest(self):
        rsb = Rsb(depth=16)
        for value in range(17):
            rsb.push(value)
        popped = [rsb.pop() for _ in range(16)]
        assert popped == list(range(16, 0, -1))   # newest 16, oldest lost
        assert rsb.pop() is None

    def test_against_deque_model(self):
        rng = random.Random(3)
        rsb = Rsb(depth=8)
        model = collections.deque(maxlen=8)
        for _ in range(20_000):
            if rng.random() < 0.55:
                value = rng.randrange(1 << 16)
                rsb.push(value)
                model.append(value)
            else:
                expected = model.pop() if model else None
                assert rsb.pop() == expected
            assert rsb.occupancy == len(model)
            assert rsb.occupancy <= 8

    def test_depth_zero_never_predicts(self):
        rsb = Rsb(depth=0)
        rsb.push(5)
        assert rsb.pop() is None
        assert rsb.peek() is None
