"""Exception types shared across the simulator."""


class ConfigError(Exception):
    """An experiment configuration is invalid; the message names the key."""


class InvariantViolation(Exception):
    """A runtime self-check failed (chain/ledger divergence, bad accounting)."""
