import json
import subprocess
import sys

import pytest

from mescosim import cli, harness
from mescosim import signals as sg
from mescosim.harness import ConfigInvalid, RunRecord, ScenarioConfig, run_scenario
from mescosim.replication import CloudStore
from mescosim.uapi import UapiClient


@pytest.fixture(scope="module")
def over_run():
    return run_scenario(ScenarioConfig(kind="overvoltage"))


def test_defaults():
    assert ScenarioConfig(kind="overvoltage").duration_s == 960.0
    assert ScenarioConfig(kind="undervoltage").duration_s == 1680.0
    assert ScenarioConfig().n_ticks == 1920


@pytest.mark.parametrize("bad", [
    {"rate_hz": 3.0}, {"rate_hz": 0.5}, {"dt_s": 0.0}, {"dt_s": 2.0}, {"duration_s": -1},
    {"kind": "brownout"}, {"link": {"drop_probability": 1.0}}, {"link": {"latency_ms": -5}},
    {"link": {"bogus": 1}}, {"deployment": "cluster"}, {"mystery": 1},
    {"controller": {"over_band": [0, 5]}}, {"profiles": {"loads": {"L": [[5, 1], [1, 1]]}}},
])
def test_config_rejected(bad):
    with pytest.raises(ConfigInvalid):
        ScenarioConfig.from_dict(bad)


def test_config_hash_ignores_output_dir():
    a = ScenarioConfig.from_dict({"seed": 3})
    b = ScenarioConfig.from_dict({"seed": 3, "out_dir": "/tmp/x"})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != ScenarioConfig.from_dict({"seed": 4}).config_hash()


def test_load_with_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"kind": "undervoltage", "seed": 1}))
    cfg = ScenarioConfig.load(p, seed=9, out_dir=None)
    assert (cfg.kind, cfg.seed, cfg.duration_s) == ("undervoltage", 9, 1680.0)
    with pytest.raises(ConfigInvalid):
        ScenarioConfig.load(tmp_path / "missing.json")


@pytest.mark.parametrize("rate, dt, expected", [(2.0, 0.5, 20), (1.0, 0.5, 10), (1.0, 1.0, 10), (1.5, 0.5, 15)])
def test_replication_rate(rate, dt, expected):
    cfg = ScenarioConfig(duration_s=10.0, rate_hz=rate, dt_s=dt)
    flags = harness.replication_ticks(cfg)
    assert sum(flags) == expected
    assert flags[0]


def test_zero_duration():
    record, metrics = run_scenario(ScenarioConfig(duration_s=0))
    assert len(record) == 0 and metrics == {}


def test_reproducible():
    cfg = ScenarioConfig(duration_s=60.0, seed=5, link={"drop_probability": 0.2, "jitter_ms": 300})
    a, _ = run_scenario(cfg)
    b, _ = run_scenario(ScenarioConfig(duration_s=60.0, seed=5, link={"drop_probability": 0.2, "jitter_ms": 300}))
    c, _ = run_scenario(ScenarioConfig(duration_s=60.0, seed=6, link={"drop_probability": 0.2, "jitter_ms": 300}))
    assert a.to_csv_text() == b.to_csv_text()
    assert a.to_csv_text() != c.to_csv_text()


def test_record_round_trip(over_run, tmp_path):
    record, _ = over_run
    path = record.write(tmp_path)
    back = RunRecord.read(path)
    assert back.to_csv_text() == record.to_csv_text()
    assert back.values == record.values and back.meta == record.meta


def test_record_monotone():
    rec = RunRecord([sg.SOC])
    rec.append(0, {sg.SOC: [1.0, "ok"]})
    with pytest.raises(ValueError):
        rec.append(0, {})


def test_all_signals_logged(over_run):
    record, _ = over_run
    first = record.values[0]
    assert all(v is not None for v in first)
    assert record.meta["replication_cycles"] == 1920
    assert record.meta["cloud_errors"] == 0


def test_metrics(over_run, tmp_path):
    record, metrics = over_run
    assert metrics["ticks"] == 1920 and metrics["duration_s"] == 960.0
    assert metrics["max_rise_pcc2"] > 5.0
    assert metrics["activations_pcc2"] >= 1
    assert harness.compute_metrics(record, kind="overvoltage") == metrics
    parsed = harness.parse_metrics(harness.format_metrics(metrics))
    assert parsed["ticks"] == "1920"


def test_metrics_example():
    # Hand-built record: one excursion above 5 % and back below 0 %.
    rec = RunRecord([sg.V_SIN_REF, sg.V_RSE_REF, sg.SOC, sg.P_BAR_DTU], meta={"kind": "overvoltage"})
    volts = [240.0, 253.0, 250.0, 239.0]
    for i, v in enumerate(volts):
        rec.append(500 * i, {sg.V_SIN_REF: [v, "ok"], sg.V_RSE_REF: [240.0, "ok"],
                             sg.SOC: [50.0 + i, "ok"], sg.P_BAR_DTU: [10.0, "ok"]})
    m = harness.compute_metrics(rec)
    assert m["activations_pcc2"] == 1 and m["deactivations_pcc2"] == 1
    assert m["activations_pcc4"] == 0
    assert m["max_rise_pcc2"] == pytest.approx(13 / 2.4)
    assert m["recovery_s_pcc2"] == 1.0
    assert m["soc_delta"] == 3.0
    assert m["dtu_heat_kwh"] == pytest.approx(10.0 * 2.0 / 3600.0)


def test_set_is_consumed_next_tick():
    cfg = ScenarioConfig()
    node = harness.SinNode(cfg, CloudStore(sg.default_registry()))
    svc = harness.NodeService(node, cfg.stale_horizon_ms)
    node.stage_a(0, 0, True)
    node.stage_b(0, 0, True)
    assert node.registry.read(sg.P_EL_SIN).value == 0.0
    r = svc.dispatch("PUT", "/v1/SIN/signals/P_el_SIN_ref", json.dumps({"value": 30.0}).encode())
    assert r.status == 200
    node.stage_a(1, 500, False)
    assert node.registry.read(sg.P_EL_SIN).value == 30.0


def test_cloud_loss_degrades_status():
    cfg = ScenarioConfig()
    # A separate process, so killing it also drops keep-alive connections.
    proc, url = harness._spawn(["serve", "--namespace", "cloud", "--port", "0"])
    client = UapiClient(url)
    for key in harness.SinNode.subscriptions:
        ns, name = key.split("/")
        client.set(ns, name, 1.0 if "P" in name or "Q" in name else 240.0, timestamp_ms=0)
    server = harness.make_ri_server("SIN", cfg, cloud_url=url)
    node = server.RequestHandlerClass.service.node
    svc = server.RequestHandlerClass.service
    try:
        node.stage_a(0, 0, True)
        node.stage_b(0, 0, True)
        assert svc.dispatch("GET", "/v1/SIN/status").body["status"] == "ok"
        proc.kill()
        proc.wait(timeout=10)
        node.stage_a(6, 3000, True)
        node.stage_b(6, 3000, True)
        assert node.cloud_errors == 2
        assert svc.dispatch("GET", "/v1/SIN/status").body["status"] == "degraded"
    finally:
        proc.kill()
        server.server_close()


def test_make_ri_server_errors():
    with pytest.raises(ConfigInvalid):
        harness.make_ri_server("NOPE", ScenarioConfig(), cloud_url="127.0.0.1:1")
    with pytest.raises(ConfigInvalid):
        harness.make_ri_server("SIN", ScenarioConfig())


def test_serve_lists_rse_signals():
    cloud = harness.make_ri_server("cloud", ScenarioConfig())
    cloud_url = "127.0.0.1:%d" % cloud.server_address[1]
    proc = subprocess.Popen([sys.executable, "-m", "mescosim", "serve", "--namespace", "RSE",
                             "--port", "0", "--cloud", cloud_url], stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline().strip()
        assert line.startswith("listening http://127.0.0.1:")
        client = UapiClient(line.split(" ", 1)[1])
        names = {s["name"] for s in client.list("RSE")}
        assert {"P_th_CHP", "P_el_RSE", "Q_el_RSE", "V_RSE_ref", "f_RSE_ref", "ON_OFF"} <= names
        client.close()
    finally:
        proc.terminate()
        proc.wait(timeout=10)
        cloud.server_close()


def test_cli_run_and_metrics(tmp_path, capsys):
    assert cli.main(["run", "--scenario", "overvoltage", "--out", str(tmp_path), "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "max_rise_pcc2=" in out and "wrote 1920 rows" in out
    for name in ("record.csv", "record.meta.json", "metrics.txt", "config.echo.json"):
        assert (tmp_path / name).exists()
    echo = json.loads((tmp_path / "config.echo.json").read_text())
    assert echo["config"]["seed"] == 1 and len(echo["sha256"]) == 64
    assert cli.main(["metrics", "--record", str(tmp_path / "record.csv")]) == 0
    again = capsys.readouterr().out
    assert again == (tmp_path / "metrics.txt").read_text()


def test_cli_validate(tmp_path, capsys):
    assert cli.main(["validate", "--scenario", "undervoltage"]) == 0
    out = capsys.readouterr().out
    assert "kind=undervoltage" in out and "PCC4" in out
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"rate_hz": 10}))
    assert cli.main(["validate", "--config", str(bad)]) == 2
    assert "rate_hz" in capsys.readouterr().err
