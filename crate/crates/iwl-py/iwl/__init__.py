"""Python bindings for the iwl verification engine.

Configs use the same TOML schema as the `iwl` CLI; reports come back as JSON
text. See `catalog()` for the registered templates and formula tokens.
"""

from ._native import catalog, lift_check, run, sweep, wasserstein2_1d

__all__ = ["catalog", "lift_check", "run", "sweep", "wasserstein2_1d"]
