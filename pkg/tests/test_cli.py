import json
import threading

import pytest
import requests

from tracemorph.pipeline.cli import main
from tracemorph.pipeline.config import read_meta

TINY_CONFIG = """
# desk-top smoke configuration
size = 64
k_steps = 10
beta_start = 1e-3
beta_end = 0.2
n_samples = 2
base_channels = 4
depth = 2
gamma_embedding_dim = 4
feature_channels = 3
batch = 2
diffusion_steps = 12
deformation_steps = 6
translate_batch = 2
seg_steps = 50
"""


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(TINY_CONFIG)
    data = root / "data"
    ckpt = root / "ckpt"
    bundles = root / "bundles"
    report = root / "report"

    assert main(["gen-data", "--config", str(cfg), "--seed", "2", "--out", str(data), "--n-per-domain", "4"]) == 0
    assert main(["train-diffusion", "--config", str(cfg), "--seed", "2", "--data", str(data), "--out", str(ckpt)]) == 0
    assert main([
        "train-deform", "--config", str(cfg), "--seed", "2", "--data", str(data),
        "--diffusion", str(ckpt / "diffusion.ckpt"), "--out", str(ckpt),
    ]) == 0
    assert main([
        "translate", "--config", str(cfg), "--seed", "2", "--data", str(data),
        "--diffusion", str(ckpt / "diffusion.ckpt"), "--deform", str(ckpt / "deform.ckpt"),
        "--out", str(bundles), "--cases", "2",
    ]) == 0
    assert main([
        "evaluate", "--config", str(cfg), "--seed", "2", "--data", str(data),
        "--bundles", str(bundles), "--out", str(report),
    ]) == 0
    return root


def test_cli_chain_produces_artifacts(cli_run):
    assert (cli_run / "data" / "meta.txt").exists()
    assert (cli_run / "ckpt" / "diffusion.ckpt").exists()
    assert (cli_run / "ckpt" / "deform.ckpt").exists()
    assert (cli_run / "bundles" / "a_0000" / "meta.txt").exists()
    report = read_meta(cli_run / "report" / "report.txt")
    assert "dice_mean" in report and "dbhat_translated_target" in report


def test_cli_bundle_meta_echoes_config(cli_run):
    meta = read_meta(cli_run / "bundles" / "a_0000" / "meta.txt")
    assert meta["config.k_steps"] == "10"
    assert meta["config.seed"] == "2"


def test_cli_serve_and_trace(cli_run):
    from tracemorph.pipeline.service import make_server

    server = make_server(cli_run / "bundles", "127.0.0.1:0")
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        host, port = server.server_address[:2]
        base = f"http://{host}:{port}"
        cases = requests.get(f"{base}/api/cases").json()["cases"]
        assert cases == ["a_0000", "a_0001"]
        r = requests.post(
            f"{base}/api/cases/a_0000/trace",
            json={"direction": "forward", "points": [{"x": 5.0, "y": 6.0}]},
        )
        assert r.status_code == 200
    finally:
        server.shutdown()
        server.server_close()


def test_cli_gradcheck_subcommand(tmp_path):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--seeds", "1", "--out", str(out)]) == 0
    report = read_meta(out / "gradcheck.txt")
    assert set(report) == {"l_in", "mi", "data", "smoothness", "alignment", "total"}
    assert all(float(v) < 1e-4 for v in report.values())


def test_cli_unknown_config_key_fails(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("definitely_not_a_key = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
