from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from fedsem.core.config import (
    Settings,
    config_hash,
    dump_resolved_config,
    get_settings,
    load_experiment_config,
)
from fedsem.core.errors import InvalidInputError
from fedsem.main import create_parser, main
from fedsem.schemas.experiment import DEFAULT_CONCEPTS, ExperimentConfig

ROOT = Path(__file__).resolve().parents[1]


def _write_config(path: Path, config: ExperimentConfig) -> Path:
    path.write_text(yaml.safe_dump(config.model_dump(mode="json", by_alias=True)), encoding="utf-8")
    return path


def test_defaults_without_document() -> None:
    config = load_experiment_config(None)
    assert config.data.concepts == DEFAULT_CONCEPTS
    assert config.federation.gamma == 0.9
    assert config.inference.zds_lambda == 0.5
    assert config.seed == 0


def test_shipped_configs_load() -> None:
    default = load_experiment_config(ROOT / "configs" / "default.yaml")
    assert default.federation.num_clients == 10
    assert default.data.center is False
    assert default.data.noise_heterogeneity == 3.0
    assert default.inference.calibration_bins == 5
    poison = load_experiment_config(ROOT / "configs" / "poison.yaml")
    assert [a.kind.value for a in poison.attacks] == ["poison_random", "evasion"]


def test_flags_override_document(tmp_path: Path) -> None:
    path = tmp_path / "c.yaml"
    path.write_text("seed: 5\noutput_dir: somewhere\ninference:\n  lambda: 0.25\n", encoding="utf-8")
    config = load_experiment_config(path, seed=9, output_dir=str(tmp_path / "out"))
    assert config.seed == 9
    assert config.federation.seed == 9
    assert config.output_dir == str(tmp_path / "out")
    assert config.inference.zds_lambda == 0.25


@pytest.mark.parametrize("text", [
    "unknown_key: 1\n",
    "federation:\n  gamma: 1.5\n",
    "data:\n  novel: [not_a_concept]\n",
    "- just\n- a list\n",
    "data: [unclosed\n",
    "attacks:\n  - kind: evasion\n    target_concept: dns_tunneling\n",
])
def test_invalid_documents_are_rejected(tmp_path: Path, text: str) -> None:
    path = tmp_path / "bad.yaml"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(InvalidInputError):
        load_experiment_config(path)


def test_missing_document_is_invalid_input(tmp_path: Path) -> None:
    with pytest.raises(InvalidInputError, match="cannot read"):
        load_experiment_config(tmp_path / "nope.yaml")


def test_config_hash_ignores_output_dir() -> None:
    a = ExperimentConfig(output_dir="x")
    b = ExperimentConfig(output_dir="y")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(ExperimentConfig(seed=1))


def test_resolved_config_round_trips(tmp_path: Path) -> None:
    config = ExperimentConfig(seed=4, output_dir=str(tmp_path))
    path = tmp_path / "resolved.yaml"
    path.write_text(dump_resolved_config(config), encoding="utf-8")
    assert load_experiment_config(path) == config


def test_settings_from_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("FEDSEM_MAX_WORKERS", "2")
    monkeypatch.setenv("FEDSEM_ENCODER_TIMEOUT", "10")
    get_settings.cache_clear()
    settings = get_settings()
    assert settings.max_workers == 2
    assert settings.encoder_timeout == 10.0
    assert settings.encoder_url is None
    assert Settings(http_max_retries=0).http_max_retries == 0


def test_parser_knows_every_stage() -> None:
    parser = create_parser()
    for command in ("prototypes", "gen", "train", "infer", "report", "run"):
        args = parser.parse_args([command, "--seed", "3", "--out", "x"])
        assert args.command == command
        assert args.seed == 3


def test_cli_usage_errors_exit_2(tmp_path: Path) -> None:
    assert main([]) == 2
    assert main(["fly"]) == 2
    assert main(["run", "--ablation", "everything"]) == 2
    assert main(["--help"]) == 0


def test_cli_invalid_config_exits_2(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    bad = tmp_path / "bad.yaml"
    bad.write_text("federation:\n  rounds: 0\n", encoding="utf-8")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "out")]) == 2
    assert "invalid" in capsys.readouterr().err


def test_cli_stage_without_inputs_exits_1(small_config: ExperimentConfig, tmp_path: Path,
                                          capsys: pytest.CaptureFixture) -> None:
    path = _write_config(tmp_path / "small.yaml", small_config)
    assert main(["train", "--config", str(path)]) == 1
    err = capsys.readouterr().err
    assert "stage 'train' failed" in err


def test_cli_runs_stages_one_by_one(small_config: ExperimentConfig, tmp_path: Path,
                                    capsys: pytest.CaptureFixture) -> None:
    path = _write_config(tmp_path / "small.yaml", small_config)
    out = tmp_path / "stages"
    for command in ("prototypes", "gen", "train", "infer", "report"):
        assert main([command, "--config", str(path), "--out", str(out)]) == 0, command
    echoed = capsys.readouterr().out
    assert "seed: 3" in echoed
    resolved = yaml.safe_load((out / "resolved_config.yaml").read_text(encoding="utf-8"))
    assert resolved["output_dir"] == str(out)
    assert resolved["inference"]["lambda"] == 0.5
    assert (out / "metrics" / "summary.csv").is_file()
    assert not (out / "manifest.json").exists()


def test_cli_run_with_ablation(small_config: ExperimentConfig, tmp_path: Path) -> None:
    path = _write_config(tmp_path / "small.yaml", small_config)
    out = tmp_path / "ablation"
    assert main(["run", "--config", str(path), "--out", str(out), "--seed", "8", "--ablation", "no_trust"]) == 0
    resolved = yaml.safe_load((out / "resolved_config.yaml").read_text(encoding="utf-8"))
    assert resolved["ablation"] == "no_trust"
    assert resolved["seed"] == 8
    assert (out / "manifest.json").is_file()
