"""Line-oriented key=value run configuration shared by all subcommands.

Every key is valid for every subcommand; unknown keys are rejected.
Flag overrides (--set, --seed, --deterministic) win over the file.
"""

from __future__ import annotations

from .builder import DenseNetConfig
from .exceptions import ConfigError
from .features import FilterbankConfig
from .trainer import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"not a boolean: {raw!r}")


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    # model
    "variant": (str, "plain"),
    "depth": (int, 22),
    "blocks": (int, 3),
    "growth_rate": (int, 12),
    "compression": (float, 1.0),
    "input_channels": (int, 3),
    "input_height": (int, 11),
    "input_width": (int, 40),
    "num_classes": (int, 1500),
    "first_conv_channels": (int, 16),
    # feature extraction
    "sample_rate": (int, 16000),
    "frame_length_ms": (float, 25.0),
    "frame_shift_ms": (float, 10.0),
    "fft_size": (int, 512),
    "num_filters": (int, 40),
    "low_freq": (float, 20.0),
    "high_freq": (float, 0.0),  # 0 means Nyquist
    "pre_emphasis": (float, 0.97),
    "log_floor": (float, 1e-10),
    "add_deltas": (_parse_bool, True),
    "context_left": (int, 5),
    "context_right": (int, 5),
    # training
    "initial_lr": (float, 0.01),
    "batch_size": (int, 256),
    "max_epochs": (int, 20),
    "momentum": (float, 0.9),
    "lr_halving_factor": (float, 0.5),
    "lr_improvement_threshold": (float, 0.002),
    "min_lr": (float, 1e-5),
    "seed": (int, 0),
    "deterministic": (_parse_bool, False),
    "validation_fraction": (float, 0.05),
    # synthetic data
    "synth_classes": (int, 10),
    "synth_frames_per_class": (int, 50),
    "synth_separation": (float, 5.0),
    # paths ("" means unset)
    "manifest": (str, ""),
    "output_archive": (str, ""),
    "stats_file": (str, ""),
    "train_archive": (str, ""),
    "val_archive": (str, ""),
    "cmvn_stats": (str, ""),
    "checkpoint": (str, ""),
    "metrics_log": (str, ""),
    "eval_archive": (str, ""),
}


def default_config() -> dict:
    return {key: default for key, (_, default) in SCHEMA.items()}


def _apply(config: dict, key: str, raw: str, where: str) -> None:
    key = key.strip()
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown config key '{key}'")
    parser, _ = SCHEMA[key]
    try:
        config[key] = parser(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: invalid value for '{key}': {exc}") from exc


def load_run_config(path=None, overrides=()) -> dict:
    """Defaults, then the config file, then --set overrides (last wins)."""
    config = default_config()
    if path is not None:
        try:
            with open(path) as handle:
                text = handle.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected KEY=VALUE, got {stripped!r}")
            key, _, raw = stripped.partition("=")
            _apply(config, key, raw, f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, raw = item.partition("=")
        _apply(config, key, raw, "--set")
    return config


def densenet_config_from(config: dict) -> DenseNetConfig:
    model = DenseNetConfig(
        variant=config["variant"],
        depth=config["depth"],
        blocks=config["blocks"],
        growth_rate=config["growth_rate"],
        compression=config["compression"],
        input_channels=config["input_channels"],
        input_height=config["input_height"],
        input_width=config["input_width"],
        num_classes=config["num_classes"],
        first_conv_channels=config["first_conv_channels"],
    )
    model.validate()
    return model


def filterbank_config_from(config: dict) -> FilterbankConfig:
    filterbank = FilterbankConfig(
        sample_rate=config["sample_rate"],
        frame_length_ms=config["frame_length_ms"],
        frame_shift_ms=config["frame_shift_ms"],
        fft_size=config["fft_size"],
        num_filters=config["num_filters"],
        low_freq=config["low_freq"],
        high_freq=None if config["high_freq"] == 0.0 else config["high_freq"],
        pre_emphasis=config["pre_emphasis"],
        log_floor=config["log_floor"],
    )
    filterbank.validate()
    return filterbank


def train_config_from(config: dict) -> TrainConfig:
    train = TrainConfig(
        initial_lr=config["initial_lr"],
        batch_size=config["batch_size"],
        max_epochs=config["max_epochs"],
        momentum=config["momentum"],
        halving_factor=config["lr_halving_factor"],
        improvement_threshold=config["lr_improvement_threshold"],
        min_lr=config["min_lr"],
        seed=config["seed"],
        deterministic=config["deterministic"],
    )
    train.validate()
    return train


def require_path(config: dict, key: str, purpose: str) -> str:
    value = config[key]
    if not value:
        raise ConfigError(f"config key '{key}' is required {purpose}")
    return value
