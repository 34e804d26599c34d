import json
import math

import pytest

from mescosim import signals as sg
from mescosim.uapi import (
    CloudService, EndpointUnreachable, PortInUse, RemoteCloud, UapiClient, UapiError,
    UapiService, make_server, sample_from_dict, sample_to_dict, start_server,
)


class Clock:
    def __init__(self):
        self.now = 0

    def __call__(self):
        return self.now


@pytest.fixture
def svc():
    return UapiService(sg.default_registry(), node_id="SIN", clock=Clock())


@pytest.fixture
def served(svc):
    server = start_server(svc)
    client = UapiClient(f"http://127.0.0.1:{server.server_address[1]}")
    yield svc, client
    client.close()
    server.shutdown()
    server.server_close()


def _put(svc, path, body):
    return svc.dispatch("PUT", path, json.dumps(body).encode())


def test_set_then_get(svc):
    r = _put(svc, "/v1/SIN/signals/P_el_SIN", {"value": 50, "timestamp_ms": 3})
    assert r.status == 200 and r.body["value"] == 40 and r.body["quality"] == "clamped"
    r = svc.dispatch("GET", "/v1/SIN/signals/P_el_SIN")
    assert (r.status, r.body["value"], r.body["timestamp_ms"]) == (200, 40, 3)


def test_get_unwritten_is_204(svc):
    assert svc.dispatch("GET", "/v1/SIN/signals/SoC").status == 204


@pytest.mark.parametrize("path", ["/v1/SIN/signals/nope", "/v1/XYZ/signals/SoC", "/v2/x", "/v1/XYZ/signals"])
def test_not_found(svc, path):
    assert svc.dispatch("GET", path).status == 404


def test_set_errors(svc):
    assert _put(svc, "/v1/SIN/signals/SoC", {"value": "high"}).status == 422
    assert svc.dispatch("PUT", "/v1/SIN/signals/SoC", b"{nan").status == 422
    assert _put(svc, "/v1/SIN/signals/SoC", {"value": 1, "timestamp_ms": 1.5}).status == 422
    _put(svc, "/v1/SIN/signals/SoC", {"value": 1, "timestamp_ms": 10})
    assert _put(svc, "/v1/SIN/signals/SoC", {"value": 2, "timestamp_ms": 5}).status == 409
    assert svc.dispatch("POST", "/v1/SIN/signals/SoC").status == 405


def test_set_bare_number_uses_clock(svc):
    svc.clock.now = 77
    r = _put(svc, "/v1/SIN/signals/SoC", 12.5)
    assert (r.body["value"], r.body["timestamp_ms"], r.body["origin"]) == (12.5, 77, "SIN")


def test_status_ok_then_degraded(svc):
    svc = UapiService(sg.default_registry(), clock=Clock(), horizon_ms=2000,
                      subscriptions={"SIN": {sg.SOC}})
    _put(svc, "/v1/SIN/signals/SoC", {"value": 1, "timestamp_ms": 0})
    assert svc.dispatch("GET", "/v1/SIN/status").body["status"] == "ok"
    svc.clock.now = 2001
    body = svc.dispatch("GET", "/v1/SIN/status").body
    assert body["status"] == "degraded" and body["signals"][sg.SOC]["age_ms"] == 2001
    svc.offline = True
    assert svc.dispatch("GET", "/v1/SIN/status").body["status"] == "offline"


def test_sample_wire_round_trip():
    reg = sg.default_registry()
    s = reg.write(sg.T_DTU, 0.1 + 0.2, 9, "DTU")
    back = sample_from_dict(reg, json.loads(json.dumps(sample_to_dict(s))))
    assert back == s


def test_http_round_trip(served):
    svc, client = served
    assert len(client.list("SIN")) == len(svc.registry.descriptors("SIN"))
    assert client.get("SIN", "SoC") is None
    client.set("SIN", "SoC", 1 / 3, timestamp_ms=4, origin="TUD")
    got = client.get("SIN", "SoC")
    assert got["value"] == 1 / 3 and got["origin"] == "TUD"
    with pytest.raises(UapiError) as err:
        client.get("SIN", "nope")
    assert err.value.status == 404
    with pytest.raises(UapiError) as err:
        client.request("PUT", "/v1/SIN/signals/SoC", raw=b'{"value": NaN}')
    assert err.value.status == 422


def test_port_in_use(served):
    svc, client = served
    with pytest.raises(PortInUse):
        make_server(svc, port=client.port)


def test_unreachable():
    server = make_server(UapiService(sg.default_registry()))
    port = server.server_address[1]
    server.server_close()
    with pytest.raises(EndpointUnreachable):
        UapiClient(f"127.0.0.1:{port}", timeout=1).status("SIN")


def test_remote_cloud_matches_local():
    cloud = CloudService(sg.default_registry())
    server = start_server(cloud)
    try:
        remote = RemoteCloud(UapiClient(f"127.0.0.1:{server.server_address[1]}"), sg.default_registry())
        reg = sg.default_registry()
        a = reg.write(sg.SOC, 10.0, 3, "SIN")
        assert remote.merge_many([a]) == [True]
        assert remote.merge_many([a]) == [False]
        got = remote.fetch([sg.SOC, sg.T_DTU])
        assert got == {sg.SOC: a, sg.T_DTU: None}
        with pytest.raises(sg.UnknownSignal):
            remote.fetch(["SIN/nope"])
    finally:
        server.shutdown()
        server.server_close()


def test_floats_exact_on_wire(served):
    svc, client = served
    for i, v in enumerate([math.pi, 1e-300, 39.999999999999, -0.0]):
        client.set("SIN", "P_el_SIN", v, timestamp_ms=i)
        assert client.get("SIN", "P_el_SIN")["value"] == v
