import json
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from brachyplan import igtlink
from brachyplan.phantom import make_phantom
from brachyplan.service import CaseManager, ServiceConfig, create_app
from brachyplan.volume import dump_volume
from brachyplan.workflow import LEGAL_TRANSITIONS, WorkflowStage, can_transition


@pytest.fixture(scope="module")
def phantom():
    return make_phantom(n=32)


@pytest.fixture
def client(tmp_path):
    app = create_app(ServiceConfig(data_dir=str(tmp_path / "data")))
    with TestClient(app) as c:
        yield c


def advance_to(client, case_id, target_chain):
    for target in target_chain:
        r = client.post(f"/cases/{case_id}/advance", json={"target": target})
        assert r.status_code == 200, r.text


def prepared_case(client, phantom, case_id="c1"):
    """Case driven to PREPLAN with phantom volume, labels, and device."""
    assert client.post("/cases", json={"case_id": case_id}).status_code == 201
    advance_to(client, case_id, ["DIAGNOSIS"])
    r = client.post(
        f"/cases/{case_id}/volumes?protocol=T2",
        content=dump_volume(phantom.volume),
        headers={"content-type": "application/octet-stream"},
    )
    assert r.status_code == 200, r.text
    r = client.post(
        f"/cases/{case_id}/volumes",
        content=dump_volume(phantom.labels),
        headers={"content-type": "application/octet-stream"},
    )
    assert r.status_code == 200, r.text
    r = client.post(f"/cases/{case_id}/eligibility", json={"eligible": True})
    assert r.status_code == 200
    r = client.post(
        f"/cases/{case_id}/device-comparison",
        json={"candidates": ["template-6x6-10mm", "template-4x4-15mm"]},
    )
    assert r.status_code == 200, r.text
    r = client.post(
        f"/cases/{case_id}/device-selection", json={"device_id": "template-6x6-10mm"}
    )
    assert r.status_code == 200, r.text
    lm = phantom.landmarks
    r = client.post(
        f"/cases/{case_id}/registration",
        json={
            "model_points": lm.model_points.tolist(),
            "image_points": lm.image_points.tolist(),
        },
    )
    assert r.status_code == 200, r.text
    assert r.json()["landmark_residual_mm"] < 1e-9
    return case_id


class TestCaseLifecycle:
    def test_create_and_read(self, client):
        r = client.post("/cases", json={"case_id": "c1"})
        assert r.status_code == 201
        body = r.json()
        assert body["stage"] == "ARRIVAL"
        assert body["eligibility"] == "undecided"
        assert client.get("/cases/c1").json()["stage"] == "ARRIVAL"

    def test_get_unknown_case(self, client):
        assert client.get("/cases/nope").status_code == 404

    def test_duplicate_create_conflicts(self, client):
        client.post("/cases", json={"case_id": "c1"})
        assert client.post("/cases", json={"case_id": "c1"}).status_code == 409

    def test_upload_before_diagnosis_rejected(self, client, phantom):
        client.post("/cases", json={"case_id": "c1"})
        r = client.post("/cases/c1/volumes", content=dump_volume(phantom.volume))
        assert r.status_code == 409

    def test_upload_returns_advisories(self, client, phantom):
        client.post("/cases", json={"case_id": "c1"})
        advance_to(client, "c1", ["DIAGNOSIS"])
        r = client.post("/cases/c1/volumes?protocol=T1", content=dump_volume(phantom.volume))
        assert r.status_code == 200
        assert len(r.json()["advisories"]) == 1  # 2 mm slices, T1 expects 3 mm

    def test_ineligible_closes_case(self, client, phantom):
        client.post("/cases", json={"case_id": "c1"})
        advance_to(client, "c1", ["DIAGNOSIS"])
        r = client.post("/cases/c1/eligibility", json={"eligible": False})
        assert r.json()["stage"] == "CLOSED"
        r = client.post("/cases/c1/volumes", content=dump_volume(phantom.volume))
        assert r.status_code == 409

    def test_malformed_volume_rejected(self, client):
        client.post("/cases", json={"case_id": "c1"})
        advance_to(client, "c1", ["DIAGNOSIS"])
        r = client.post("/cases/c1/volumes", content=b"not an svol")
        assert r.status_code == 422

    def test_transition_matrix(self, client):
        # service must reject exactly the non-edges of the stage graph
        stages = list(WorkflowStage)
        for a in stages:
            for b in stages:
                assert can_transition(a, b) == ((a, b) in LEGAL_TRANSITIONS)
        # spot-check over HTTP: skipping DIAGNOSIS is rejected
        client.post("/cases", json={"case_id": "c1"})
        r = client.post("/cases/c1/advance", json={"target": "INTRAOP"})
        assert r.status_code == 409
        r = client.post("/cases/c1/advance", json={"target": "DEVICE_SELECTION"})
        assert r.status_code == 409  # reserved to the eligibility endpoint


class TestDeviceComparison:
    def test_two_templates_compared(self, client, phantom):
        prepared_case(client, phantom)
        state = client.get("/cases/c1").json()
        assert state["stage"] == "PREPLAN"
        assert state["device_id"] == "template-6x6-10mm"
        reqs = client.get("/cases/c1/inventory-requests").json()["requests"]
        assert len(reqs) == 1
        assert reqs[0]["response"] == {"available": True, "lead_time_days": 0}

    def test_empty_candidates_rejected(self, client, phantom):
        client.post("/cases", json={"case_id": "c1"})
        advance_to(client, "c1", ["DIAGNOSIS"])
        client.post("/cases/c1/volumes", content=dump_volume(phantom.labels))
        client.post("/cases/c1/eligibility", json={"eligible": True})
        r = client.post("/cases/c1/device-comparison", json={"candidates": []})
        assert r.status_code == 422

    def test_unknown_device_rejected(self, client, phantom):
        client.post("/cases", json={"case_id": "c1"})
        advance_to(client, "c1", ["DIAGNOSIS"])
        client.post("/cases/c1/volumes", content=dump_volume(phantom.labels))
        client.post("/cases/c1/eligibility", json={"eligible": True})
        r = client.post("/cases/c1/device-comparison", json={"candidates": ["nope"]})
        assert r.status_code == 404

    def test_selecting_non_candidate_rejected(self, client, phantom):
        client.post("/cases", json={"case_id": "c1"})
        advance_to(client, "c1", ["DIAGNOSIS"])
        client.post("/cases/c1/volumes", content=dump_volume(phantom.labels))
        client.post("/cases/c1/eligibility", json={"eligible": True})
        client.post(
            "/cases/c1/device-comparison", json={"candidates": ["template-6x6-10mm"]}
        )
        r = client.post(
            "/cases/c1/device-selection", json={"device_id": "template-4x4-15mm"}
        )
        assert r.status_code == 422


class TestRegistrationEndpoint:
    def test_landmarks_before_device_rejected(self, client, phantom):
        client.post("/cases", json={"case_id": "c1"})
        lm = phantom.landmarks
        r = client.post(
            "/cases/c1/registration",
            json={
                "model_points": lm.model_points.tolist(),
                "image_points": lm.image_points.tolist(),
            },
        )
        assert r.status_code == 409

    def test_degenerate_landmarks_rejected(self, client, phantom):
        prepared_case(client, phantom)
        pts = [[0, 0, 0], [1, 1, 1], [2, 2, 2]]
        r = client.post(
            "/cases/c1/registration", json={"model_points": pts, "image_points": pts}
        )
        assert r.status_code == 422

    def test_icp_refine_improves_noisy_landmarks(self, client, phantom):
        prepared_case(client, phantom)
        rng = np.random.default_rng(5)
        lm = phantom.landmarks
        noisy = lm.image_points + rng.normal(scale=1.0, size=(3, 3))
        r = client.post(
            "/cases/c1/registration",
            json={
                "model_points": lm.model_points.tolist(),
                "image_points": noisy.tolist(),
                "icp": {"enabled": True, "structure": "HR_CTV", "max_iterations": 40},
            },
        )
        assert r.status_code == 200, r.text
        icp = r.json()["icp"]
        assert icp["final_rms_mm"] <= icp["rms_history"][0] + 1e-12
        history = icp["rms_history"]
        assert all(a >= b - 1e-12 for a, b in zip(history, history[1:]))


class TestPlanEditing:
    def test_patch_returns_verdicts(self, client, phantom):
        prepared_case(client, phantom)
        r = client.patch(
            "/cases/c1/plan", json={"hole_id": "C3", "depth_mm": 60.0, "active": True}
        )
        assert r.status_code == 200, r.text
        body = r.json()
        structures = [row["structure"] for row in body["verdicts"]]
        assert structures == ["HR_CTV", "OAR_BLADDER", "OAR_RECTUM_SIGMOID", "OAR_SMALL_BOWEL"]
        bladder = next(v for v in body["verdicts"] if v["structure"] == "OAR_BLADDER")
        assert bladder["verdict"] in ("pass", "fail")
        assert body["plan"]["needles"] is not None

    def test_identical_patches_are_idempotent(self, client, phantom):
        prepared_case(client, phantom)
        r1 = client.patch("/cases/c1/plan", json={"hole_id": "C3", "depth_mm": 60.0, "active": True})
        r2 = client.patch("/cases/c1/plan", json={"hole_id": "C3", "depth_mm": 60.0, "active": True})
        assert json.dumps(r1.json(), sort_keys=True) == json.dumps(r2.json(), sort_keys=True)

    def test_edit_on_closed_case_rejected(self, client, phantom):
        client.post("/cases", json={"case_id": "c1"})
        advance_to(client, "c1", ["DIAGNOSIS"])
        client.post("/cases/c1/eligibility", json={"eligible": False})
        r = client.patch("/cases/c1/plan", json={"hole_id": "A1", "depth_mm": 10.0})
        assert r.status_code == 409

    def test_bad_depth_rejected(self, client, phantom):
        prepared_case(client, phantom)
        r = client.patch("/cases/c1/plan", json={"hole_id": "A1", "depth_mm": -4.0})
        assert r.status_code == 422

    def test_unknown_hole_rejected(self, client, phantom):
        prepared_case(client, phantom)
        r = client.patch("/cases/c1/plan", json={"hole_id": "Z9", "depth_mm": 10.0})
        assert r.status_code == 404

    def test_sheet_state_reconstructable_from_get(self, client, phantom):
        prepared_case(client, phantom)
        client.patch("/cases/c1/plan", json={"hole_id": "B2", "depth_mm": 42.0, "active": True})
        state = client.get("/cases/c1").json()
        needle = next(n for n in state["plan"]["needles"] if n["hole_id"] == "B2")
        assert needle == {"hole_id": "B2", "depth_mm": 42.0, "active": True, "dwell_step_mm": 5.0}
        assert state["verdicts"] is not None


class TestSliceView:
    def test_axial_slice_with_overlays(self, client, phantom):
        prepared_case(client, phantom)
        client.patch("/cases/c1/plan", json={"hole_id": "C3", "depth_mm": 60.0, "active": True})
        r = client.get("/cases/c1/slice?orientation=axial&dose=true&labels=true")
        assert r.status_code == 200
        body = r.json()
        assert body["shape"] == [32, 32]
        assert len(body["image"]) == 32
        assert "dose" in body and "labels" in body
        assert len(body["needles"]) == 1
        assert body["needles"][0]["hole_id"] == "C3"

    def test_bad_orientation(self, client, phantom):
        prepared_case(client, phantom)
        assert client.get("/cases/c1/slice?orientation=diagonal").status_code == 422


class TestIntraopLoop:
    def test_advance_arms_listener_and_transform_updates(self, tmp_path, phantom):
        config = ServiceConfig(data_dir=str(tmp_path / "data"), igtl_port=0)
        app = create_app(config)
        with TestClient(app) as client:
            prepared_case(client, phantom)
            advance_to(client, "c1", ["INTRAOP"])
            before = client.get("/cases/c1").json()["registration_rows"]
            port = app.state.igtl_server.port
            conn = igtlink.IgtlConnection.open("127.0.0.1", port)
            rows = list(np.hstack([np.eye(3), [[1.5], [0.0], [-5.0]]]).ravel())
            conn.send(igtlink.Transform(tuple(rows)), "c1")
            deadline = time.time() + 5
            after = before
            while time.time() < deadline:
                after = client.get("/cases/c1").json()["registration_rows"]
                if after != before:
                    break
                time.sleep(0.05)
            assert after == rows
            conn.close()

    def test_transform_for_other_device_ignored(self, tmp_path, phantom):
        config = ServiceConfig(data_dir=str(tmp_path / "data"), igtl_port=0)
        app = create_app(config)
        with TestClient(app) as client:
            prepared_case(client, phantom)
            advance_to(client, "c1", ["INTRAOP"])
            before = client.get("/cases/c1").json()["registration_rows"]
            port = app.state.igtl_server.port
            conn = igtlink.IgtlConnection.open("127.0.0.1", port)
            rows = list(np.hstack([np.eye(3), [[9.0], [9.0], [9.0]]]).ravel())
            conn.send(igtlink.Transform(tuple(rows)), "other-case")
            time.sleep(0.3)
            assert client.get("/cases/c1").json()["registration_rows"] == before
            conn.close()


class TestFollowup:
    def test_complete_overlay_bundle(self, client, phantom):
        prepared_case(client, phantom)
        advance_to(client, "c1", ["INTRAOP", "POSTOP"])
        r = client.post("/cases/c1/volumes", content=dump_volume(phantom.post_volume))
        assert r.status_code == 200
        bundle = client.get("/cases/c1/followup").json()
        assert bundle["complete"]
        assert set(bundle["refs"]) == {"volume", "device", "registration"}

    def test_incomplete_overlay_lists_missing(self, client, phantom):
        prepared_case(client, phantom)
        advance_to(client, "c1", ["INTRAOP", "POSTOP"])
        bundle = client.get("/cases/c1/followup").json()
        assert not bundle["complete"]
        assert "VOLUME@POST" in bundle["missing"]


class TestRestartRecovery:
    def test_state_reloads_from_disk(self, tmp_path, phantom):
        data_dir = str(tmp_path / "data")
        app = create_app(ServiceConfig(data_dir=data_dir))
        with TestClient(app) as client:
            prepared_case(client, phantom)
            client.patch("/cases/c1/plan", json={"hole_id": "C3", "depth_mm": 33.0, "active": True})
        app2 = create_app(ServiceConfig(data_dir=data_dir))
        with TestClient(app2) as client2:
            state = client2.get("/cases/c1").json()
            assert state["stage"] == "PREPLAN"
            assert state["device_id"] == "template-6x6-10mm"
            needle = next(n for n in state["plan"]["needles"] if n["hole_id"] == "C3")
            assert needle["depth_mm"] == 33.0
            # archived report is rehydrated: verdicts survive the restart
            assert state["verdicts"] is not None
            assert client2.get("/cases/c1/report").status_code == 200
            r = client2.patch("/cases/c1/plan", json={"hole_id": "C3", "depth_mm": 35.0})
            assert r.status_code == 200
