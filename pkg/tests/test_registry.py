from fractions import Fraction

import pytest

from hydrasim.coin import RewardKind
from hydrasim.config import CHUNK_SIZE_BYTES
from hydrasim.peer import Network
from hydrasim.registry import (
    AddDownloader,
    AddHolder,
    Contribute,
    DatasetMeta,
    FileEntry,
    MergeMeta,
    RegistryError,
    ReportUnavailable,
    TrackerStateMachine,
    dataset_hash,
    merge_meta,
)
from hydrasim.sim import Process

MB = 1_000_000


class TestTrackerStateMachine:
    def test_every_change_bumps_the_version_once(self):
        sm = TrackerStateMachine("mnist")
        r1 = sm.apply(1, Contribute(peer=3, files=(("a.bin", 10), ("b.bin", 20)), request_id="c1"))
        assert (r1.version, r1.changed, r1.bytes_added) == (2, True, 30)
        r2 = sm.apply(2, AddDownloader(peer=4, request_id="d1"))
        r3 = sm.apply(3, AddHolder(peer=4, filename="a.bin", request_id="h1"))
        assert (r2.version, r3.version) == (3, 4)
        assert sm.meta.file("a.bin").holders == [3, 4]

    def test_unchanged_commands_keep_the_version(self):
        sm = TrackerStateMachine("mnist")
        sm.apply(1, Contribute(peer=3, files=(("a.bin", 10),), request_id="c1"))
        again = sm.apply(2, Contribute(peer=3, files=(("a.bin", 10),), request_id="c2"))
        missing = sm.apply(3, AddHolder(peer=5, filename="nope", request_id="h1"))
        assert not again.changed and not missing.changed
        assert sm.meta.version == 2

    def test_redelivered_request_is_a_no_op(self):
        sm = TrackerStateMachine("mnist")
        cmd = Contribute(peer=3, files=(("a.bin", 10),), request_id="c1")
        first = sm.apply(1, cmd)
        assert sm.apply(2, cmd) == first
        assert sm.meta.version == 2

    def test_unavailable_flag_clears_when_a_holder_appears(self):
        sm = TrackerStateMachine("mnist")
        sm.apply(1, Contribute(peer=3, files=(("a.bin", 10),), request_id="c1"))
        sm.apply(2, ReportUnavailable(filename="a.bin", request_id="u1"))
        assert sm.meta.file("a.bin").unavailable
        sm.apply(3, AddHolder(peer=6, filename="a.bin", request_id="h1"))
        assert not sm.meta.file("a.bin").unavailable

    def test_unknown_command(self):
        with pytest.raises(RegistryError):
            TrackerStateMachine("mnist").apply(1, "drop table")

    def test_merge_is_a_superset_of_both_sides(self):
        old = DatasetMeta(
            title="t", hash=1, files=[FileEntry(filename="a", size=1, holders=[2, 3])], contributors=[2], version=9
        )
        new = DatasetMeta(
            title="t",
            hash=1,
            files=[FileEntry(filename="a", size=1, holders=[4]), FileEntry(filename="b", size=2, holders=[4])],
            contributors=[4],
            downloaders=[5],
            version=3,
            incarnation=1,
        )
        sm = TrackerStateMachine("t", incarnation=1, base=new)
        sm.apply(1, MergeMeta(meta=old, request_id="m1"))
        merged = sm.meta
        assert merged.holder_pairs() >= old.holder_pairs() | new.holder_pairs()
        assert merged.peers() == {2, 4, 5}
        assert merged.version == 10
        assert merge_meta(new, old).holder_pairs() == merged.holder_pairs()


def _run(network: Network, address: int, process: Process):
    return network.sim.execute(network.peer(address).node, process, limit=120_000)


@pytest.fixture
def network(small_network) -> Network:
    return small_network(8)


def test_create_contribute_download(network):
    creator, downloader = network.peer(1), network.peer(5)
    created = _run(network, 1, creator.client.create_dataset("mnist"))
    assert created.ok and created.hash == dataset_hash("mnist")

    files = [("train.bin", 3 * CHUNK_SIZE_BYTES + 17), ("labels.bin", 1_000)]
    contributed = _run(network, 1, creator.client.contribute(created.hash, files))
    assert contributed.ok and contributed.version == 2

    report = _run(network, 5, downloader.client.download(created.hash))
    assert report.complete
    assert report.received == dict(files)
    assert report.served == {1: sum(size for _, size in files)}
    assert report.bytes_received == 3 * CHUNK_SIZE_BYTES + 1_017
    assert downloader.holder.holds(created.hash, "train.bin")

    meta = _run(network, 5, downloader.client.fetch_meta(created.hash))
    assert meta.file("train.bin").holders == [1, 5]
    assert meta.downloaders == [5]
    assert meta.total_bytes() == report.bytes_received

    network.sim.run_for(1_000)
    ledger = network.ledger
    assert ledger.total(RewardKind.CONTRIBUTION, 1) == Fraction(sum(s for _, s in files), MB)
    assert ledger.total(RewardKind.SEEDING, 1) == Fraction(sum(s for _, s in files), MB) / 2


def test_titles_are_unique_network_wide(network):
    assert _run(network, 1, network.peer(1).client.create_dataset("mnist")).ok
    again = _run(network, 3, network.peer(3).client.create_dataset("mnist"))
    assert not again.ok and again.error == "dataset exists"


def test_missing_holder_shrinks_the_download(network):
    hash_ = _run(network, 1, network.peer(1).client.create_dataset("cifar")).hash
    _run(network, 2, network.peer(2).client.contribute(hash_, [("gone.bin", 500)]))
    _run(network, 1, network.peer(1).client.contribute(hash_, [("kept.bin", 400)]))
    if network.peer(2).trackers.group_for(hash_) is not None:
        pytest.skip("contributor happens to host the tracker for this seed")
    network.sim.crash(2)

    report = _run(network, 6, network.peer(6).client.download(hash_))
    assert report.unavailable == ["gone.bin"]
    assert report.received == {"kept.bin": 400}
    meta = _run(network, 6, network.peer(6).client.fetch_meta(hash_))
    assert meta.file("gone.bin").unavailable


def test_invalid_items_penalize_the_contributor(network):
    ledger = network.ledger
    ledger.award(RewardKind.ANNOTATION, 2, 10)
    network.peer(4).client.validate(contributor=2, valid=6, invalid=4)
    network.sim.run_for(500)
    assert ledger.balance(2) == 0
    assert ledger.total(RewardKind.VALIDATION, 4) == Fraction(1)
    assert ledger.audit() == []
