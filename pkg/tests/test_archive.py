import pytest

from brachyplan.archive import (
    ArtifactKind,
    ArtifactStore,
    CorruptArtifactError,
    MissingArtifactError,
)
from brachyplan.workflow import TreatmentPhase

PRE = TreatmentPhase.PRE
POST = TreatmentPhase.POST


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path)


class TestStore:
    def test_first_version_is_one(self, store):
        ref = store.store("c1", PRE, ArtifactKind.PLAN, b"plan-bytes")
        assert ref.version == 1

    def test_idempotent_for_same_bytes(self, store):
        a = store.store("c1", PRE, ArtifactKind.PLAN, b"same")
        b = store.store("c1", PRE, ArtifactKind.PLAN, b"same")
        assert a == b
        assert len(store.refs("c1")) == 1

    def test_append_only_versions(self, store):
        v1 = store.store("c1", PRE, ArtifactKind.PLAN, b"one")
        v2 = store.store("c1", PRE, ArtifactKind.PLAN, b"two")
        assert (v1.version, v2.version) == (1, 2)
        assert store.fetch(v1) == b"one"
        assert store.fetch(v2) == b"two"

    def test_fetch_round_trip(self, store):
        ref = store.store("c1", PRE, ArtifactKind.VOLUME, b"\x00\x01\x02")
        assert store.fetch(ref) == b"\x00\x01\x02"

    def test_latest(self, store):
        for payload in (b"a", b"b", b"c"):
            store.store("c1", PRE, ArtifactKind.TRANSFORM, payload)
        latest = store.latest("c1", PRE, ArtifactKind.TRANSFORM)
        assert latest.version == 3
        assert store.fetch(latest) == b"c"

    def test_tampering_detected(self, store, tmp_path):
        ref = store.store("c1", PRE, ArtifactKind.PLAN, b"original")
        path = tmp_path / "cases" / "c1" / ref.filename
        path.write_bytes(b"tampered!")
        with pytest.raises(CorruptArtifactError):
            store.fetch(ref)

    def test_missing_ref(self, store):
        with pytest.raises(MissingArtifactError):
            store.latest("c1", PRE, ArtifactKind.DOSE)

    def test_versions_independent_per_slot(self, store):
        store.store("c1", PRE, ArtifactKind.PLAN, b"p")
        ref = store.store("c1", PRE, ArtifactKind.DOSE, b"d")
        assert ref.version == 1

    def test_bad_case_id(self, store):
        with pytest.raises(ValueError):
            store.store("../evil", PRE, ArtifactKind.PLAN, b"x")


class TestFollowupOverlay:
    def test_complete_bundle(self, store):
        store.store("c1", POST, ArtifactKind.VOLUME, b"scan")
        store.store("c1", PRE, ArtifactKind.DEVICE, b"device")
        store.store("c1", PRE, ArtifactKind.TRANSFORM, b"reg")
        bundle = store.followup_overlay("c1")
        assert bundle["complete"]
        assert set(bundle["refs"]) == {"volume", "device", "registration"}

    def test_missing_post_volume(self, store):
        store.store("c1", PRE, ArtifactKind.DEVICE, b"device")
        store.store("c1", PRE, ArtifactKind.TRANSFORM, b"reg")
        bundle = store.followup_overlay("c1")
        assert not bundle["complete"]
        assert "VOLUME@POST" in bundle["missing"]

    def test_latest_registration_wins(self, store):
        store.store("c1", POST, ArtifactKind.VOLUME, b"scan")
        store.store("c1", PRE, ArtifactKind.DEVICE, b"device")
        store.store("c1", PRE, ArtifactKind.TRANSFORM, b"reg-1")
        store.store("c1", PRE, ArtifactKind.TRANSFORM, b"reg-2")
        bundle = store.followup_overlay("c1")
        assert bundle["refs"]["registration"]["version"] == 2
