import threading

import pytest

from diffid.config import serialize_config, validate_config
from diffid.errors import ConfigValidationError
from diffid.manifest import read_manifest
from diffid.pipeline import STAGES, IirRegistry, run_pipeline
from diffid.prompts import default_iir_candidates, register_captioner
from diffid.toydata import generate_sprite_dataset

CFG_TEMPLATE = """
[pipeline]
sources = {src}
out_dir = {out}
seed = 17
workers = {workers}
[prompts]
captioner = {captioner}
[generation]
reference_set_size = 12
samples_per_identity = 12
timesteps = 20
finetune_steps = 60
[filter]
tau = 0.7
[assembly]
crop_height = 32
crop_width = 16
"""


@pytest.fixture(scope="module")
def source_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    generate_sprite_dataset(root / "data", n_identities=3, images_per_identity=8, seed=4)
    return root


def make_cfg(root, out="out", workers=1, captioner="stub"):
    text = CFG_TEMPLATE.format(src="data/toy_manifest.tsv", out=out, workers=workers,
                               captioner=captioner)
    return validate_config(text, base_dir=root)


@pytest.fixture(scope="module")
def completed_run(source_dir):
    cfg = make_cfg(source_dir)
    result = run_pipeline(cfg, base_dir=source_dir)
    return cfg, result


# --- config validation ---

def test_empty_config_yields_pure_defaults():
    cfg = validate_config("")
    assert cfg.reference_set_size == 200
    assert cfg.samples_per_identity == 200
    assert cfg.prior_lambda == 1.0
    assert cfg.filter_kind == "reid_ctf"
    assert cfg.backend == "toy"
    assert cfg.crop_size == (256, 128)
    assert cfg.finetune_steps == 1000


def test_validation_reports_every_violation():
    bad = "[generation]\nreference_set_size = 0\n[filter]\ntau = 1.5\n"
    with pytest.raises(ConfigValidationError) as err:
        validate_config(bad)
    text = "\n".join(err.value.violations)
    assert "reference_set_size" in text
    assert "tau" in text
    assert len(err.value.violations) == 2


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigValidationError, match="unknown"):
        validate_config("[pipeline]\nmystery_knob = 3\n")
    with pytest.raises(ConfigValidationError, match="unknown section"):
        validate_config("[mystery]\na = 1\n")


def test_missing_source_manifest_reported(tmp_path):
    with pytest.raises(ConfigValidationError, match="does not exist"):
        validate_config("[pipeline]\nsources = nope.tsv\n", base_dir=tmp_path)


def test_serialize_round_trip(source_dir):
    cfg = make_cfg(source_dir)
    again = validate_config(serialize_config(cfg), base_dir=source_dir)
    assert again == cfg
    assert validate_config(serialize_config(again), base_dir=source_dir) == again


def test_environment_overrides():
    cfg = validate_config("", env={"DIFFID_TAU": "0.25", "DIFFID_SAMPLES_PER_IDENTITY": "33"})
    assert cfg.tau == 0.25
    assert cfg.samples_per_identity == 33
    with pytest.raises(ConfigValidationError, match="tau"):
        validate_config("", env={"DIFFID_TAU": "nope"})


# --- IIR registry ---

def test_registry_unique_under_concurrency():
    for trial in range(20):
        registry = IirRegistry()
        candidates = default_iir_candidates(2000)
        tokens = {}
        lock = threading.Lock()

        def work(k):
            token = registry.allocate(f"ident-{k}", candidates, seed=trial * 100 + k)
            with lock:
                tokens[f"ident-{k}"] = token

        threads = [threading.Thread(target=work, args=(k,)) for k in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(set(tokens.values())) == 8
        assert registry.tokens == tokens


def test_registry_allocate_is_idempotent_per_key():
    registry = IirRegistry()
    first = registry.allocate("a", ["qzx", "vlem"], seed=1)
    assert registry.allocate("a", ["qzx", "vlem"], seed=99) == first


# --- full pipeline ---

def test_all_stages_succeed_in_order(completed_run):
    _, result = completed_run
    assert result.failures == {}
    assert len(result.manifest.identities) == 3
    for identity in ("id000", "id001", "id002"):
        records = result.ledger.for_identity("toy", identity)
        assert [r.stage for r in records] == list(STAGES)
        assert all(r.status == "ok" for r in records)


def test_outputs_written(completed_run, source_dir):
    _, result = completed_run
    out = source_dir / "out"
    assert (out / "dataset" / "manifest.tsv").exists()
    assert (out / "stats.txt").exists()
    assert (out / "cdf.tsv").exists()
    assert (out / "ledger.jsonl").exists()
    assert read_manifest(result.manifest_path) == result.manifest


def test_distinct_iir_tokens_per_identity(completed_run):
    _, result = completed_run
    import json
    tokens = set()
    for identity in ("id000", "id001", "id002"):
        payload = json.loads(
            (result.out_dir / "cache" / f"toy__{identity}" / "iir.json").read_text())
        tokens.add(payload["token"])
    assert len(tokens) == 3


def test_resume_reexecutes_only_missing_stage(completed_run, source_dir):
    cfg, first = completed_run
    for path in (source_dir / "out" / "cache").glob("*/filter.json"):
        path.unlink()
    again = run_pipeline(cfg, base_dir=source_dir)
    assert again.ledger.executed("filter") == 3
    for stage in ("caption", "iir", "reference", "finetune", "sample"):
        assert again.ledger.executed(stage) == 0
    assert read_manifest(again.manifest_path) == first.manifest


def test_two_runs_byte_identical_manifests(source_dir):
    cfg_a = make_cfg(source_dir, out="det_a", workers=2)
    cfg_b = make_cfg(source_dir, out="det_b", workers=1)
    ra = run_pipeline(cfg_a, base_dir=source_dir)
    rb = run_pipeline(cfg_b, base_dir=source_dir)
    assert ra.manifest_path.read_bytes() == rb.manifest_path.read_bytes()


def test_identity_failure_is_isolated(source_dir):
    calls = {"n": 0}

    def flaky(images):
        calls["n"] += 1
        if calls["n"] == 2:  # workers=1 -> second identity in sorted order
            raise RuntimeError("caption backend down")
        return "wearing dark clothes, walking"

    register_captioner("flaky-test", flaky)
    cfg = make_cfg(source_dir, out="flaky_out", workers=1, captioner="flaky-test")
    result = run_pipeline(cfg, base_dir=source_dir)
    assert result.exit_code == 1
    assert result.failures == {"toy/id001": "caption"}
    assert sorted(result.manifest.identities) == ["id000", "id002"]
    failed_records = result.ledger.for_identity("toy", "id001")
    assert [r.stage for r in failed_records] == ["caption"]
    assert failed_records[0].status == "failed"
    assert "caption backend down" in failed_records[0].error


def test_key_in_wrong_section_rejected():
    with pytest.raises(ConfigValidationError, match="unknown key"):
        validate_config("[assembly]\ncaptioner = stub\n")
