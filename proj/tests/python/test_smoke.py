import math

import pytest

import conflictheads as ch


def tiny_config(tmp_path):
    config = ch.RunConfig()
    config.n_samples = 400
    config.sizes.train_probe = 24
    config.sizes.validation = 40
    config.sizes.test = 40
    config.n_layers = 2
    config.n_heads = 2
    config.d_model = 16
    config.train.steps = 40
    config.train.batch_size = 4
    config.train.learning_rate = 0.1
    config.train.bias_mix = 0.7
    config.train.eval_every = 20
    config.train.seed = 3
    config.k_plus = 1
    config.k_minus = 1
    config.asymmetry_top_n = 1
    config.lambda_grid = [1e-3, 1e-2]
    config.random_count = 2
    config.overlap_k = 1
    config.overlap_seeds = [1]
    config.k_plus_grid = [1, 2]
    config.k_minus_grid = [1, 2]
    for key in (
        "dataset_path",
        "checkpoint_path",
        "curve_path",
        "importance_path",
        "groups_path",
        "probe_path",
        "ablation_path",
        "maci_path",
        "report_dir",
    ):
        setattr(config, key, str(tmp_path / getattr(config, key)))
    return config


def test_version_and_config_hash():
    assert ch.__version__
    config = ch.RunConfig()
    config.validate()
    digest = config.hash()
    assert len(digest) == 16 and int(digest, 16) >= 0

    # Semantic fields move the hash; artifact paths do not.
    config.dataset_path = "elsewhere.jsonl"
    assert config.hash() == digest
    config.k_plus = config.k_plus + 1
    assert config.hash() != digest


def test_config_key_errors():
    config = ch.RunConfig()
    with pytest.raises(ch.ConfigError):
        ch.set_config_key(config, "no_such_key", "1")
    with pytest.raises(ch.ConfigError):
        ch.set_config_key(config, "train.steps", "not-a-number")
    ch.set_config_key(config, "train.steps", "17")
    assert config.train.steps == 17

    parsed = ch.parse_run_config("# comment\nk_plus = 3\n\nscope = last\n")
    assert parsed.k_plus == 3
    assert parsed.scope == "last"


def test_metrics_match_hand_values():
    assert ch.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-15)
    # Confusion table [[20, 5], [10, 15]]: observed 0.7, chance 0.5.
    labels_a = [1] * 25 + [0] * 25
    labels_b = [1] * 20 + [0] * 5 + [1] * 10 + [0] * 15
    assert ch.cohen_kappa(labels_a, labels_b) == pytest.approx(0.4, abs=1e-15)


def test_tiny_pipeline_end_to_end(tmp_path):
    config = tiny_config(tmp_path)
    ch.run_pipeline(config)

    imp = ch.load_importance(config.importance_path)
    assert imp.n_samples == 256
    assert len(imp.scores) == config.n_layers * config.n_heads
    assert imp.config_hash == config.hash()
    assert all(math.isfinite(v) for v in imp.scores.values())

    groups = ch.load_groups(config.groups_path)
    assert len(groups.driving) == config.k_plus
    assert len(groups.resisting) == config.k_minus
    assert all(score > 0 for score in groups.driving_scores)
    assert all(score < 0 for score in groups.resisting_scores)

    probe = ch.load_probe(config.probe_path)
    assert len(probe.weights) == config.k_minus * (config.d_model // config.n_heads)
    assert probe.tau is not None and 0.0 <= probe.tau <= 1.0
    assert probe.lambda_ in config.lambda_grid

    curve = ch.load_curve(config.curve_path)
    assert len(curve) == config.train.steps
    assert all(math.isfinite(p.loss) for p in curve)

    rows = ch.load_report_rows(str(tmp_path / "out/report/report_rows.csv"))
    sections = {row.section for row in rows}
    for needed in (
        "selection",
        "hallucination_rate",
        "clean_accuracy",
        "probe",
        "maci",
        "judging",
        "split_half",
        "sensitivity_drive",
        "sensitivity_probe",
    ):
        assert needed in sections
    conditions = {row.condition for row in rows if row.section == "hallucination_rate"}
    assert {"base", "drive", "resist", "joint"} <= conditions

    # Re-running the report stage reproduces the rows byte for byte.
    rows_path = tmp_path / "out/report/report_rows.csv"
    before = rows_path.read_bytes()
    ch.stage_report(config)
    assert rows_path.read_bytes() == before


def test_stage_errors_carry_types(tmp_path):
    config = tiny_config(tmp_path)
    with pytest.raises(ch.IoError):
        ch.stage_train(config)  # no dataset yet

    ch.stage_gen(config)
    with pytest.raises(ch.ConfigError):
        ch.stage_train(config)  # dataset not split yet

    with pytest.raises(ch.ConfigError):
        ch.resolve_run_config("", ["nonsense"])
