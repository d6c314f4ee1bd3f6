import random

import pytest
from hypothesis import settings
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from kvsim.geometry import PageGroupSize
from kvsim.vmm import (
    AlignmentError,
    InvalidFreeError,
    LatencyConfigError,
    LatencyModel,
    MappingError,
    PoolExhaustedError,
    VmmDevice,
)

GIB = 1024**3
KB64 = int(PageGroupSize.KB_64)
MB2 = int(PageGroupSize.MB_2)


def snapshot(dev):
    return (
        dev.pool.created,
        dev.pool.mapped,
        dev._precreated,
        {b: dict(buf.mappings) for b, buf in dev.buffers.items()},
        {h: (hd.state, hd.buffer_id, hd.offset) for h, hd in dev.handles.items()},
    )


class TestLatencyModel:
    def test_published_charges(self):
        model = LatencyModel.default()
        assert model.cost_us("vMemReserve", KB64) == 18
        assert model.cost_us("cuMemSetAccess", MB2) == 38
        assert model.cost_us("vMemFree", int(PageGroupSize.KB_256)) == 35
        assert model.cost_us("vMemCreate", KB64) == 1.7
        assert model.cost_us("cuMemCreate", MB2) == 29
        assert model.cost_us("vMemMap", int(PageGroupSize.KB_128)) == 8.5

    def test_unknown_pair_is_config_error(self):
        model = LatencyModel.default()
        with pytest.raises(LatencyConfigError):
            model.cost_us("cuMemSetAccess", KB64)
        with pytest.raises(LatencyConfigError):
            model.cost_us("vMemMap", MB2)
        with pytest.raises(LatencyConfigError):
            model.cost_us("noSuchApi", MB2)

    def test_json_round_trip(self, tmp_path):
        path = tmp_path / "latency.json"
        path.write_text('{"vMemMap": {"65536": 9.5}}')
        model = LatencyModel.from_json(path)
        assert model.cost_us("vMemMap", KB64) == 9.5

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LatencyModel({"x": {64: -1.0}})


class TestChargeLedger:
    def test_charge_accumulates(self):
        dev = VmmDevice(GIB, KB64)
        assert dev.charge("vMemReserve") == 18
        assert dev.charge("vMemReserve") == 18
        assert dev.ledger_us["vMemReserve"] == 36
        assert dev.calls["vMemReserve"] == 2

    def test_map_charges_small(self):
        dev = VmmDevice(GIB, KB64)
        buf = dev.reserve(4 * KB64)
        h = dev.create_handle()
        assert dev.map(buf, 0, h) == 8.0

    def test_map_charges_2mb_composite(self):
        dev = VmmDevice(GIB, MB2)
        buf = dev.reserve(4 * MB2)
        h = dev.create_handle()
        assert dev.map(buf, 0, h) == 40.0  # map + access-enable

    def test_release_charges(self):
        dev = VmmDevice(GIB, MB2)
        buf = dev.reserve(4 * MB2)
        dev.map(buf, 0, dev.create_handle())
        assert dev.unmap_release(buf, 0) == 57.0  # unmap + release
        dev64 = VmmDevice(GIB, KB64)
        buf64 = dev64.reserve(4 * KB64)
        dev64.map(buf64, 0, dev64.create_handle())
        assert dev64.unmap_release(buf64, 0) == 2.0

    def test_create_charges(self):
        assert VmmDevice(GIB, MB2).create_handle() is not None
        dev = VmmDevice(GIB, MB2)
        dev.create_handle()
        assert dev.ledger_us["cuMemCreate"] == 29
        dev64 = VmmDevice(GIB, KB64)
        dev64.create_handle()
        assert dev64.ledger_us["vMemCreate"] == 1.7


class TestReserve:
    def test_reserve_consumes_no_physical(self):
        dev = VmmDevice(GIB, MB2)
        buf = dev.reserve(100 * 10**9 // MB2 * MB2)
        assert buf.size >= 99 * 10**9
        assert dev.pool.created == 0 and dev.pool.mapped == 0
        assert dev.pool.free_bytes == GIB

    def test_reserve_zero(self):
        dev = VmmDevice(GIB, KB64)
        buf = dev.reserve(0)
        assert buf.size == 0 and buf.mappings == {}

    def test_reserve_misaligned(self):
        dev = VmmDevice(GIB, KB64)
        with pytest.raises(AlignmentError):
            dev.reserve(3 * KB64 + 1)


class TestCreateHandle:
    def test_pool_exhaustion_count(self):
        dev = VmmDevice(80 * GIB, MB2)
        for _ in range(40960):
            dev.create_handle()
        with pytest.raises(PoolExhaustedError):
            dev.create_handle()

    def test_zero_capacity(self):
        dev = VmmDevice(0, KB64)
        with pytest.raises(PoolExhaustedError):
            dev.create_handle()

    def test_precreate_then_take(self):
        dev = VmmDevice(GIB, KB64)
        us = dev.precreate_handles(10)
        assert us == pytest.approx(17.0)
        assert dev.pool.created == 10 and dev.precreated_available == 10
        h = dev.take_precreated()
        assert h.state == "created"
        assert dev.pool.created == 10 and dev.precreated_available == 9

    def test_precreate_respects_capacity(self):
        dev = VmmDevice(5 * KB64, KB64)
        with pytest.raises(PoolExhaustedError):
            dev.precreate_handles(6)
        assert dev.pool.created == 0


class TestMapUnmap:
    def test_double_map_rejected(self):
        dev = VmmDevice(GIB, KB64)
        buf = dev.reserve(8 * KB64)
        h = dev.create_handle()
        dev.map(buf, 0, h)
        before = snapshot(dev)
        with pytest.raises(MappingError):
            dev.map(buf, KB64, h)
        assert snapshot(dev) == before

    def test_offset_collision_rejected(self):
        dev = VmmDevice(GIB, KB64)
        buf = dev.reserve(8 * KB64)
        dev.map(buf, 0, dev.create_handle())
        h2 = dev.create_handle()
        before = snapshot(dev)
        with pytest.raises(MappingError):
            dev.map(buf, 0, h2)
        assert snapshot(dev) == before

    def test_out_of_range_rejected(self):
        dev = VmmDevice(GIB, KB64)
        buf = dev.reserve(2 * KB64)
        h = dev.create_handle()
        with pytest.raises(MappingError):
            dev.map(buf, 2 * KB64, h)

    def test_misaligned_offset_rejected(self):
        dev = VmmDevice(GIB, KB64)
        buf = dev.reserve(2 * KB64)
        h = dev.create_handle()
        with pytest.raises(AlignmentError):
            dev.map(buf, 100, h)

    def test_round_trip_restores_pool(self):
        dev = VmmDevice(GIB, KB64)
        buf = dev.reserve(2 * KB64)
        dev.map(buf, KB64, dev.create_handle())
        dev.unmap_release(buf, KB64)
        assert dev.pool.created == 0 and dev.pool.mapped == 0
        assert dev.pool.free_bytes == GIB
        assert buf.mappings == {}

    def test_invalid_free(self):
        dev = VmmDevice(GIB, KB64)
        buf = dev.reserve(2 * KB64)
        with pytest.raises(InvalidFreeError):
            dev.unmap_release(buf, 0)

    def test_mapped_handle_released_after_unmap(self):
        dev = VmmDevice(GIB, KB64)
        buf = dev.reserve(2 * KB64)
        h = dev.create_handle()
        dev.map(buf, 0, h)
        dev.unmap_release(buf, 0)
        assert h.state == "released"
        with pytest.raises(MappingError):
            dev.map(buf, 0, h)


def check_conservation(dev):
    size = dev.pool.page_group_size
    by_state = {"created": 0, "mapped": 0}
    for h in dev.handles.values():
        by_state[h.state] += 1
    created_unmapped = (by_state["created"] + dev._precreated) * size
    mapped = by_state["mapped"] * size
    assert dev.pool.free_bytes + created_unmapped + mapped == dev.pool.capacity
    assert dev.pool.created_bytes == created_unmapped + mapped
    assert dev.pool.mapped_bytes == mapped
    # handle_id -> (buffer, offset) injective; reverse map is a function
    locs = [(h.buffer_id, h.offset) for h in dev.handles.values() if h.state == "mapped"]
    assert len(locs) == len(set(locs))
    for buf in dev.buffers.values():
        for off, hid in buf.mappings.items():
            h = dev.handles[hid]
            assert (h.buffer_id, h.offset) == (buf.buffer_id, off)


def test_randomized_sequence_conserves_capacity():
    # Reference-counter oracle replay over a mixed create/map/release stream.
    rng = random.Random(20240501)
    dev = VmmDevice(64 * KB64, KB64)
    bufs = [dev.reserve(16 * KB64) for _ in range(3)]
    created = []
    mapped = []
    for _ in range(5000):
        op = rng.random()
        try:
            if op < 0.4:
                created.append(dev.create_handle())
            elif op < 0.75 and created:
                h = created.pop(rng.randrange(len(created)))
                buf = rng.choice(bufs)
                off = rng.randrange(16) * KB64
                try:
                    dev.map(buf, off, h)
                    mapped.append((buf, off))
                except MappingError:
                    created.append(h)
            elif mapped:
                buf, off = mapped.pop(rng.randrange(len(mapped)))
                dev.unmap_release(buf, off)
        except PoolExhaustedError:
            pass
        check_conservation(dev)


class VmmMachine(RuleBasedStateMachine):
    def __init__(self):
        super().__init__()
        self.dev = VmmDevice(8 * KB64, KB64)
        self.buf = self.dev.reserve(8 * KB64)
        self.created = []

    @rule()
    def create(self):
        try:
            self.created.append(self.dev.create_handle())
        except PoolExhaustedError:
            assert self.dev.pool.free_bytes < KB64

    @precondition(lambda self: self.created)
    @rule(slot=__import__("hypothesis").strategies.integers(0, 7))
    def map_one(self, slot):
        h = self.created[-1]
        try:
            self.dev.map(self.buf, slot * KB64, h)
            self.created.pop()
        except MappingError:
            assert slot * KB64 in self.buf.mappings

    @precondition(lambda self: True)
    @rule(slot=__import__("hypothesis").strategies.integers(0, 7))
    def unmap_one(self, slot):
        off = slot * KB64
        if off in self.buf.mappings:
            self.dev.unmap_release(self.buf, off)
        else:
            with pytest.raises(InvalidFreeError):
                self.dev.unmap_release(self.buf, off)

    @invariant()
    def conserved(self):
        check_conservation(self.dev)


TestVmmMachine = VmmMachine.TestCase
TestVmmMachine.settings = settings(max_examples=25, stateful_step_count=40, deadline=None)
