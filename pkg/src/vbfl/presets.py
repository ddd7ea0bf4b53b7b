"""Named experiment presets mirroring the five benchmark setups.

All presets share one desk-scale task (synthetic blobs) and the standard
20-device split of 12 workers, 5 validators and 3 miners. Malicious devices
are always the highest-numbered ones, so cold-start stake ties (broken by
lowest id) never hand round 1 to a malicious miner by accident.

The ``*_VHCAL`` presets deliberately ship without a validator threshold:
run CALIBRATE_VH first and feed its suggestion back via --vh/--vh-file.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import ConfigError
from .orchestrator import (
    BEHAVIOR_VALIDATOR_FLIP,
    BEHAVIOR_WORKER_NOISE,
    SimConfig,
)

VH_ALL_POSITIVE = 1.0  # vad can never exceed 1, so every vote is Positive


def _malicious_tail(config: SimConfig, k: int) -> tuple[int, ...]:
    if k < 0 or k > config.n_devices:
        raise ConfigError("malicious: count must lie in [0, n_devices]")
    return tuple(range(config.n_devices - k, config.n_devices))


_BASE = SimConfig(rounds=100)


@dataclass(frozen=True)
class Preset:
    name: str
    mode: str  # "vanilla" | "vbfl"
    requires_vh: bool
    config: SimConfig
    description: str


def _make_presets() -> dict[str, Preset]:
    base = _BASE
    noisy3 = replace(base, malicious=_malicious_tail(base, 3))
    presets = [
        Preset(
            "VFL_0_20",
            "vanilla",
            False,
            replace(base, malicious=()),
            "plain FL, 20 legitimate devices",
        ),
        Preset(
            "VFL_3_20",
            "vanilla",
            False,
            noisy3,
            "plain FL, 3 of 20 devices send noise-distorted updates",
        ),
        Preset(
            "VBFL_POS_0_20_VH1",
            "vbfl",
            False,
            replace(base, malicious=(), vh=VH_ALL_POSITIVE, consensus="pos"),
            "full protocol, stake consensus, no malicious devices, threshold 1.0",
        ),
        Preset(
            "VBFL_POS_3_20_VHCAL",
            "vbfl",
            True,
            replace(noisy3, consensus="pos"),
            "full protocol, stake consensus, 3/20 noisy workers, calibrated threshold",
        ),
        Preset(
            "VBFL_POS_3_20_VHCAL_MV",
            "vbfl",
            True,
            replace(
                noisy3,
                consensus="pos",
                malicious_behaviors=(BEHAVIOR_WORKER_NOISE, BEHAVIOR_VALIDATOR_FLIP),
            ),
            "as VBFL_POS_3_20_VHCAL, plus vote flipping by malicious validators",
        ),
        Preset(
            "VBFL_POW_3_20_VHCAL_D1",
            "vbfl",
            True,
            replace(noisy3, consensus="pow", pow_difficulty=1),
            "mining-race consensus at difficulty 1, 3/20 noisy workers",
        ),
        Preset(
            "VBFL_POW_3_20_VHCAL_D2",
            "vbfl",
            True,
            replace(noisy3, consensus="pow", pow_difficulty=2),
            "mining-race consensus at difficulty 2, 3/20 noisy workers",
        ),
        Preset(
            "CALIBRATE_VH",
            "vbfl",
            False,
            replace(noisy3, consensus="pos", vh=VH_ALL_POSITIVE, rounds=30),
            "threshold-calibration run: all-Positive votes, logs every vad",
        ),
    ]
    return {p.name: p for p in presets}


PRESETS = _make_presets()


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise ConfigError(f"preset: unknown preset {name!r} (known: {known})") from None


def apply_overrides(
    preset: Preset,
    rounds: int | None = None,
    seed: int | None = None,
    vh: float | None = None,
    consensus: str | None = None,
    pow_difficulty: int | None = None,
    malicious: int | None = None,
    validation_scheme: str | None = None,
) -> SimConfig:
    """Preset config plus command-line overrides, validated."""
    cfg = preset.config
    if rounds is not None:
        cfg = replace(cfg, rounds=rounds)
    if seed is not None:
        cfg = replace(cfg, master_seed=seed)
    if vh is not None:
        cfg = replace(cfg, vh=vh)
    if consensus is not None:
        cfg = replace(cfg, consensus=consensus)
    if pow_difficulty is not None:
        cfg = replace(cfg, pow_difficulty=pow_difficulty)
    if malicious is not None:
        cfg = replace(cfg, malicious=_malicious_tail(cfg, malicious))
    if validation_scheme is not None:
        cfg = replace(cfg, validation_scheme=validation_scheme)
    cfg.validate()
    return cfg
