import json

import httpx
import pytest

import protodiff
from protodiff import cli


def run(argv):
    return cli.main(argv)


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--version"])
    assert exc.value.code == 0
    assert protodiff.__version__ in capsys.readouterr().out


def test_help_lists_all_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in ("gen-data", "train-diffusion", "sample", "trajectory",
                 "train-proto", "explain", "evaluate", "compare", "serve"):
        assert name in out


def test_missing_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run([])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_head_required_for_train_proto(micro_config_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run(["train-proto", "--config", str(micro_config_path)])
    assert exc.value.code == 2
    assert "--head" in capsys.readouterr().err


def test_head_choices_enforced(micro_config_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run(["train-proto", "--config", str(micro_config_path),
             "--head", "resnet"])
    assert exc.value.code == 2


def test_gen_data_success_prints_summary(micro_config_path, tmp_path, capsys):
    code = run(["gen-data", "--config", str(micro_config_path),
                "--out", str(tmp_path / "cli_out")])
    assert code == 0
    out = capsys.readouterr().out
    assert "20 phantoms" in out
    assert (tmp_path / "cli_out" / "data" / "manifest.json").is_file()


def test_seed_override_reaches_pipeline(micro_config_path, tmp_path):
    out = tmp_path / "seeded"
    assert run(["gen-data", "--config", str(micro_config_path),
                "--out", str(out), "--seed", "42"]) == 0
    doc = json.loads((out / "data" / "manifest.json").read_text())
    assert doc["items"][0]["seed"] == 42


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[data]\nsize = 7\n")
    code = run(["gen-data", "--config", str(bad)])
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error (config):")


def test_missing_prerequisite_exits_3(micro_config_path, tmp_path, capsys):
    code = run(["evaluate", "--config", str(micro_config_path),
                "--out", str(tmp_path / "none")])
    assert code == 3
    err = capsys.readouterr().err
    assert "missing-prerequisite" in err
    assert "protodiff sample" in err


def test_count_validation_exits_2(micro_config_path, tmp_path, capsys):
    code = run(["sample", "--config", str(micro_config_path),
                "--out", str(tmp_path / "x"), "--count", "0"])
    assert code == 2
    assert "count" in capsys.readouterr().err


def test_explain_ids_are_parsed(micro_run, capsys, monkeypatch):
    captured = {}
    real = cli._post_local

    async def spy(command, payload):
        captured.update(payload)
        return await real(command, payload)

    monkeypatch.setattr(cli, "_post_local", spy)
    code = run(["explain", "--config", str(micro_run["config_path"]),
                "--head", "eppnet", "--ids", "sample_0000, sample_0001"])
    assert code == 0
    assert captured["image_ids"] == ["sample_0000", "sample_0001"]
    assert "2 images" in capsys.readouterr().out


def test_unknown_id_exits_2(micro_run, capsys):
    code = run(["explain", "--config", str(micro_run["config_path"]),
                "--head", "eppnet", "--ids", "sample_9999"])
    assert code == 2
    assert "unknown generated image" in capsys.readouterr().err


def test_remote_mode_uses_httpx_post(micro_config_path, monkeypatch, capsys):
    calls = {}

    def fake_post(url, json=None, timeout=None):
        calls["url"] = url
        calls["json"] = json
        return httpx.Response(200, json={
            "command": "gen-data", "summary": "remote ok",
            "artifacts": [], "details": {}})

    monkeypatch.setattr(cli.httpx, "post", fake_post)
    code = run(["gen-data", "--config", str(micro_config_path),
                "--server", "http://example.org:9000/"])
    assert code == 0
    assert calls["url"] == "http://example.org:9000/commands/gen-data"
    assert calls["json"]["config_path"] == str(micro_config_path)
    assert "remote ok" in capsys.readouterr().out


def test_transport_error_exits_1(micro_config_path, monkeypatch, capsys):
    def broken_post(url, json=None, timeout=None):
        raise httpx.ConnectError("connection refused")

    monkeypatch.setattr(cli.httpx, "post", broken_post)
    code = run(["gen-data", "--config", str(micro_config_path),
                "--server", "http://localhost:1"])
    assert code == 1
    assert "transport" in capsys.readouterr().err


def test_report_maps_unknown_status_to_1():
    assert cli._report(503, {"detail": "overloaded"}) == 1
    assert cli._report(409, {"detail": "no category"}) == 3


def test_internal_error_exits_1():
    assert cli._report(500, {"error": {"category": "internal",
                                       "message": "boom"}}) == 1


def test_numeric_error_exits_4():
    assert cli._report(422, {"error": {"category": "numeric",
                                       "message": "nan"}}) == 4
