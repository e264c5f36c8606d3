import json
import threading
from dataclasses import replace

import numpy as np
import pytest
import requests
import torch

from tracemorph.deform import integrate, inverse, smooth_random_velocity
from tracemorph.grid import Image2D, read_grid
from tracemorph.networks import ConditionalDenoiser, RegistrationNet
from tracemorph.pipeline.config import ConfigError, RunConfig, load_config, parse_config_text, read_meta
from tracemorph.pipeline.data import generate_dataset, load_dataset, make_case, save_dataset
from tracemorph.pipeline.segment import fit_segmenter, mask_metrics, otsu_threshold, segment
from tracemorph.pipeline.service import make_server
from tracemorph.pipeline.train import net_config
from tracemorph.pipeline.translate import (
    BUNDLE_FILES,
    TraceBundle,
    read_bundle,
    trace_points,
    translate_case,
    translate_cases_to_dir,
    write_bundle,
)
from tracemorph.rng import derive_seed

TINY_CFG = RunConfig(
    seed=3,
    n_per_domain=6,
    k_steps=10,
    beta_start=1e-3,
    beta_end=0.2,
    n_samples=2,
    base_channels=4,
    depth=2,
    gamma_embedding_dim=4,
    feature_channels=3,
    translate_batch=3,
)


def untrained_nets(cfg: RunConfig):
    denoiser = ConditionalDenoiser(net_config(cfg, derive_seed(cfg.seed, "init-diffusion")))
    regnet = RegistrationNet(net_config(cfg, derive_seed(cfg.seed, "init-deformation")))
    return denoiser, regnet


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_file_round_trip(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nk_steps = 50\nlambda1 = 0.1\npairing = fixed\nuse_eps_aux = false\n")
    cfg = load_config(p)
    assert cfg.k_steps == 50 and cfg.lambda1 == 0.1
    assert cfg.pairing == "fixed" and cfg.use_eps_aux is False


def test_config_overrides_beat_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 1\n")
    cfg = load_config(p, {"seed": 9, "n_samples": 3})
    assert cfg.seed == 9 and cfg.n_samples == 3


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, {"not_a_key": 1})
    p = tmp_path / "bad.cfg"
    p.write_text("k_steps = soon\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        parse_config_text("this line has no equals")


def test_config_echo_contains_schedule_keys():
    echo = RunConfig().to_dict()
    for key in ("k_steps", "beta_start", "beta_end", "n_samples", "stride"):
        assert key in echo


def test_diffusion_warmup_is_capped_and_scaled():
    assert RunConfig(diffusion_steps=2000).diffusion_warmup_steps == 200
    assert RunConfig(diffusion_steps=500_000).diffusion_warmup_steps == 10_000
    assert RunConfig(warmup_diffusion=123).diffusion_warmup_steps == 123


def test_reference_training_defaults():
    import inspect

    from tracemorph.deform import DEFAULT_SQUARING_STEPS
    from tracemorph.diffusion import (
        BETA_END_DEFAULT,
        BETA_START_DEFAULT,
        SAMPLES_PER_OUTPUT_DEFAULT,
        TRAIN_STEPS_DEFAULT,
        denoise_loop,
    )

    cfg = RunConfig()
    assert cfg.lr_diffusion == 1e-4
    assert cfg.lr_deformation == 2e-4
    assert cfg.warmup_deformation == 200
    assert cfg.batch == 3
    assert DEFAULT_SQUARING_STEPS == 7
    assert (TRAIN_STEPS_DEFAULT, BETA_START_DEFAULT, BETA_END_DEFAULT) == (2000, 1e-6, 1e-2)
    assert SAMPLES_PER_OUTPUT_DEFAULT == 50
    assert inspect.signature(denoise_loop).parameters["n_samples"].default == 50


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def test_dataset_deterministic_and_byte_identical(tmp_path):
    a1, b1 = generate_dataset(4, seed=7)
    a2, b2 = generate_dataset(4, seed=7)
    for c1, c2 in zip(a1 + b1, a2 + b2):
        assert torch.equal(c1.image.data, c2.image.data)
        assert torch.equal(c1.mask.data, c2.mask.data)
    d1, d2 = tmp_path / "d1", tmp_path / "d2"
    save_dataset(d1, a1, b1)
    save_dataset(d2, a2, b2)
    for f1 in sorted(d1.rglob("*")):
        if f1.is_file():
            f2 = d2 / f1.relative_to(d1)
            assert f1.read_bytes() == f2.read_bytes(), f1.name


def test_dataset_case_independent_of_generation_order():
    solo = make_case("a", 3, seed=7)
    _, _ = generate_dataset(2, seed=7)
    again = make_case("a", 3, seed=7)
    assert torch.equal(solo.image.data, again.image.data)


def test_mask_area_matches_ellipse_area_oracle():
    a, b = generate_dataset(20, seed=13)
    for c in a + b:
        expected = np.pi * c.gen_params["ra"] * c.gen_params["rb"]
        assert abs(c.gen_params["mask_area"] - expected) / expected < 0.03
        assert int(c.mask.data.sum()) == c.gen_params["mask_area"]


def test_domain_gap_is_wide():
    from tracemorph.similarity import bhattacharyya_distance, pooled_histogram

    a, b = generate_dataset(20, seed=17)
    d = bhattacharyya_distance(
        pooled_histogram([c.image for c in a]), pooled_histogram([c.image for c in b])
    )
    assert d > 0.3


def test_dataset_round_trip(tmp_path):
    a, b = generate_dataset(3, seed=23)
    save_dataset(tmp_path / "ds", a, b)
    a2, b2 = load_dataset(tmp_path / "ds")
    assert len(a2) == len(a) and len(b2) == len(b)
    for c1, c2 in zip(a + b, a2 + b2):
        np.testing.assert_array_equal(c1.image.numpy(), c2.image.numpy())
        np.testing.assert_array_equal(c1.mask.numpy(), c2.mask.numpy())
        assert c1.gen_params == c2.gen_params


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def test_otsu_on_bimodal_pool():
    rng = np.random.default_rng(5)
    pool = np.concatenate([rng.normal(0.2, 0.02, 5000), rng.normal(0.8, 0.05, 2000)])
    thr = otsu_threshold(np.clip(pool, 0, 1))
    assert 0.25 < thr < 0.72


def test_segmenter_high_dice_on_clean_target_cases():
    _, b = generate_dataset(12, seed=29)
    seg = fit_segmenter(b)
    dices = [mask_metrics(segment(seg, c.image), c.mask)["dice"] for c in b]
    assert float(np.mean(dices)) >= 0.95


def test_segmenter_degrades_on_untranslated_source():
    a, b = generate_dataset(12, seed=31)
    seg = fit_segmenter(b)
    dices = [mask_metrics(segment(seg, c.image), c.mask)["dice"] for c in a]
    assert float(np.mean(dices)) < 0.3


def test_segmenter_deterministic():
    _, b = generate_dataset(6, seed=37)
    seg = fit_segmenter(b)
    m1 = segment(seg, b[0].image)
    m2 = segment(seg, b[0].image)
    assert torch.equal(m1.data, m2.data)


def test_tiny_net_segmenter_learns_target_domain():
    _, b = generate_dataset(10, seed=41)
    seg = fit_segmenter(b, kind="tiny-net", seed=1, steps=200)
    dices = [mask_metrics(segment(seg, c.image), c.mask)["dice"] for c in b[:5]]
    assert float(np.mean(dices)) > 0.8


def test_mask_metric_arithmetic():
    ident = Image2D.from_array(np.ones((4, 4), dtype=np.float32))
    assert mask_metrics(ident, ident) == {"acc": 1.0, "dice": 1.0, "iou": 1.0, "miou": 1.0}
    # equal-area strips with two-thirds intersection: Dice 2/3, fg IoU 1/2
    pred = np.zeros((4, 4), dtype=np.float32)
    truth = np.zeros((4, 4), dtype=np.float32)
    pred[:, 0:3] = 1
    truth[:, 1:4] = 1
    m = mask_metrics(Image2D.from_array(pred), Image2D.from_array(truth))
    assert m["dice"] == pytest.approx(2 / 3)
    assert m["iou"] == pytest.approx(1 / 2)


def test_empty_fit_set_rejected():
    with pytest.raises(ValueError):
        fit_segmenter([])


# ---------------------------------------------------------------------------
# translation + bundles
# ---------------------------------------------------------------------------

def test_translate_with_untrained_nets_passes_through_structure(tmp_path):
    a, _ = generate_dataset(2, seed=43)
    denoiser, regnet = untrained_nets(TINY_CFG)
    bundle = translate_case(a[0].image, a[0].case_id, denoiser, regnet, TINY_CFG)
    # zero-init velocity heads mean phi = Id
    assert float(bundle.forward_field.disp.u.abs().max()) == 0.0
    assert float(bundle.inverse_field.disp.u.abs().max()) == 0.0
    np.testing.assert_array_equal(
        bundle.structure_deformed.numpy(), bundle.structure_source.numpy()
    )
    d = write_bundle(tmp_path, bundle)
    assert sorted(p.name for p in d.iterdir()) == sorted(BUNDLE_FILES + ("meta.txt",))


def test_translate_deterministic_bundles(tmp_path):
    a, _ = generate_dataset(3, seed=47)
    denoiser, regnet = untrained_nets(TINY_CFG)
    d1 = tmp_path / "run1"
    d2 = tmp_path / "run2"
    translate_cases_to_dir(a, denoiser, regnet, TINY_CFG, d1)
    translate_cases_to_dir(a, denoiser, regnet, TINY_CFG, d2)
    files1 = sorted(p for p in d1.rglob("*") if p.is_file())
    assert files1
    for f1 in files1:
        f2 = d2 / f1.relative_to(d1)
        assert f1.read_bytes() == f2.read_bytes(), f1.name


def test_translate_chunking_does_not_change_results(tmp_path):
    # payload bytes are identical however cases are grouped; only the config
    # echo in meta.txt records the differing translate_batch value
    a, _ = generate_dataset(3, seed=53)
    denoiser, regnet = untrained_nets(TINY_CFG)
    translate_cases_to_dir(a, denoiser, regnet, replace(TINY_CFG, translate_batch=1), tmp_path / "b1")
    translate_cases_to_dir(a, denoiser, regnet, replace(TINY_CFG, translate_batch=3), tmp_path / "b3")
    for f1 in sorted(p for p in (tmp_path / "b1").rglob("*") if p.is_file()):
        f2 = tmp_path / "b3" / f1.relative_to(tmp_path / "b1")
        if f1.name == "meta.txt":
            m1 = {k: v for k, v in read_meta(f1).items() if k != "config.translate_batch"}
            m2 = {k: v for k, v in read_meta(f2).items() if k != "config.translate_batch"}
            assert m1 == m2
        else:
            assert f1.read_bytes() == f2.read_bytes(), f1.name


def test_bundle_round_trip_and_checksum_guard(tmp_path):
    a, _ = generate_dataset(1, seed=59)
    denoiser, regnet = untrained_nets(TINY_CFG)
    bundle = translate_case(a[0].image, a[0].case_id, denoiser, regnet, TINY_CFG)
    d = write_bundle(tmp_path, bundle)
    back = read_bundle(d)
    assert back.case_id == bundle.case_id
    np.testing.assert_array_equal(back.forward_field.disp.numpy(), bundle.forward_field.disp.numpy())
    # tamper with a payload: checksum verification must fail
    target = d / "translated.pgm"
    raw = bytearray(target.read_bytes())
    raw[-1] ^= 0xFF
    target.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        read_bundle(d)


def test_bundle_meta_echoes_config(tmp_path):
    a, _ = generate_dataset(1, seed=61)
    denoiser, regnet = untrained_nets(TINY_CFG)
    bundle = translate_case(a[0].image, a[0].case_id, denoiser, regnet, TINY_CFG)
    for key, value in TINY_CFG.to_dict().items():
        assert bundle.meta[f"config.{key}"] == value


# ---------------------------------------------------------------------------
# point tracing + service
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def served_bundles(tmp_path_factory):
    """Two bundles (identity field and a smooth field) behind a live server."""
    root = tmp_path_factory.mktemp("bundles")
    a, _ = generate_dataset(2, seed=67)
    denoiser, regnet = untrained_nets(TINY_CFG)
    ident = translate_case(a[0].image, "ident_0000", denoiser, regnet, TINY_CFG)
    write_bundle(root, ident)

    v = smooth_random_velocity(64, 64, max_mag=2.5, sigma=6.0, seed=5, dtype=torch.float32)
    fwd = integrate(v)
    bwd = inverse(v)
    smooth = TraceBundle(
        case_id="smooth_0000",
        source=a[1].image,
        translated=a[1].image,
        structure_source=a[1].mask,
        structure_deformed=a[1].mask,
        forward_field=fwd,
        inverse_field=bwd,
        meta={"case_id": "smooth_0000", "metric.residual_mean": "0.0", "metric.residual_max": "0.0"},
    )
    write_bundle(root, smooth)

    server = make_server(root, "127.0.0.1:0")
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    yield f"http://{host}:{port}", root
    server.shutdown()
    server.server_close()


def test_service_lists_cases_and_meta(served_bundles):
    base, _ = served_bundles
    cases = requests.get(f"{base}/api/cases").json()["cases"]
    assert cases == ["ident_0000", "smooth_0000"]
    meta = requests.get(f"{base}/api/cases/ident_0000/meta").json()
    assert meta["case_id"] == "ident_0000"
    assert requests.get(f"{base}/api/cases/nope/meta").status_code == 404


def test_service_serves_images_and_fields(served_bundles):
    base, root = served_bundles
    r = requests.get(f"{base}/api/cases/ident_0000/image/source")
    assert r.status_code == 200
    assert r.content == (root / "ident_0000" / "source.pgm").read_bytes()
    r = requests.get(f"{base}/api/cases/smooth_0000/field/forward")
    assert r.content == (root / "smooth_0000" / "forward_field.plsg").read_bytes()
    assert requests.get(f"{base}/api/cases/ident_0000/image/bogus").status_code == 404


def test_service_trace_identity_and_bit_equality(served_bundles):
    base, root = served_bundles
    pts = [{"x": 3.25, "y": 7.5}, {"x": 0.0, "y": 0.0}]
    r = requests.get if False else requests.post
    resp = r(f"{base}/api/cases/ident_0000/trace", json={"direction": "forward", "points": pts}).json()
    assert resp["points"] == pts  # identity field maps points to themselves

    field = read_grid(root / "smooth_0000" / "forward_field.plsg")
    expected = trace_points(field, [(3.25, 7.5), (0.0, 0.0)])
    resp = r(f"{base}/api/cases/smooth_0000/trace", json={"direction": "forward", "points": pts}).json()
    got = [(p["x"], p["y"]) for p in resp["points"]]
    assert got == [(x, y) for x, y in expected]  # bit-for-bit via JSON round trip


def test_service_trace_round_trip_within_half_pixel(served_bundles):
    base, _ = served_bundles
    rng = np.random.default_rng(71)
    pts = [{"x": float(x), "y": float(y)} for x, y in rng.uniform(8, 56, size=(20, 2))]
    fwd = requests.post(
        f"{base}/api/cases/smooth_0000/trace", json={"direction": "forward", "points": pts}
    ).json()["points"]
    back = requests.post(
        f"{base}/api/cases/smooth_0000/trace", json={"direction": "inverse", "points": fwd}
    ).json()["points"]
    err = max(abs(b["x"] - p["x"]) + abs(b["y"] - p["y"]) for b, p in zip(back, pts))
    assert err < 0.5


def test_service_trace_validation(served_bundles):
    base, _ = served_bundles
    r = requests.post(f"{base}/api/cases/ident_0000/trace", json={"direction": "sideways", "points": []})
    assert r.status_code == 400
    r = requests.post(f"{base}/api/cases/ident_0000/trace", json={"direction": "forward", "points": [{"x": 1}]})
    assert r.status_code == 400
    r = requests.post(
        f"{base}/api/cases/ident_0000/trace",
        data=b"not json",
        headers={"Content-Type": "application/json"},
    )
    assert r.status_code == 400


def test_service_concurrent_identical_requests(served_bundles):
    base, _ = served_bundles
    pts = [{"x": 12.5, "y": 30.25}]
    results = []

    def hit():
        r = requests.post(
            f"{base}/api/cases/smooth_0000/trace", json={"direction": "forward", "points": pts}
        )
        results.append(r.text)

    threads = [threading.Thread(target=hit) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(results)) == 1


def test_service_grades_append_and_average(served_bundles):
    base, root = served_bundles
    for grader, scores in enumerate([(1, 2, 3), (3, 3, 3), (5, 4, 3)]):
        r = requests.post(
            f"{base}/api/cases/ident_0000/grade",
            json={
                "progression": scores[0],
                "realism": scores[1],
                "traceability": scores[2],
                "note": f"grader {grader}",
            },
        )
        assert r.status_code == 200
    got = requests.get(f"{base}/api/cases/ident_0000/grades").json()
    assert got["averages"] == {"progression": 3.0, "realism": 3.0, "traceability": 3.0}
    log_lines = (root / "grades.log").read_text().strip().splitlines()
    assert len(log_lines) == 3
    assert all(json.loads(l)["case_id"] == "ident_0000" for l in log_lines)


def test_service_grade_validation(served_bundles):
    base, _ = served_bundles
    r = requests.post(
        f"{base}/api/cases/ident_0000/grade",
        json={"progression": 6, "realism": 1, "traceability": 1},
    )
    assert r.status_code == 400
    r = requests.post(
        f"{base}/api/cases/ident_0000/grade",
        json={"progression": 1.5, "realism": 1, "traceability": 1},
    )
    assert r.status_code == 400
