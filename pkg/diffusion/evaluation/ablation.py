"""Component lattice (hint encoder x online augmentation x consistency loss) and the w_c sweep."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

from diffusion.constants import HINT_DENSE, HINT_SPARSE, MODE_CONTROLNET, MODE_SIAMESE, W_C_SWEEP
from diffusion.exceptions import ConfigError
from diffusion.utils.hashing import config_hash

log = logging.getLogger("diffusion.eval")

GRIDS = ("full", "components", "wc")

# (dense hint, online augmentation, consistency loss) per numbered setting.
COMPONENT_LATTICE = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (False, True, True),
    (True, True, False),
    (True, False, True),
    (True, True, True),
)


@dataclass(frozen=True)
class AblationSetting:
    name: str
    dhi: bool
    online_aug: bool
    l_c: bool
    w_c: float

    @property
    def mode(self) -> str:
        return MODE_SIAMESE if (self.online_aug or self.l_c) else MODE_CONTROLNET

    def overrides(self) -> dict:
        return {
            "HINT": HINT_DENSE if self.dhi else HINT_SPARSE,
            "ONLINE_AUG": self.online_aug,
            "W_C": self.w_c if self.l_c else 0.0,
            "MODE": self.mode,
        }


def ablation_settings(grid: str = "full", w_c_values: Sequence[float] = W_C_SWEEP) -> list[AblationSetting]:
    if grid not in GRIDS:
        raise ConfigError(f"grid must be one of {GRIDS}, got {grid!r}")
    rows = []
    if grid in ("full", "components"):
        for i, (dhi, aug, lc) in enumerate(COMPONENT_LATTICE, start=1):
            rows.append(AblationSetting(f"setting{i}", dhi, aug, lc, 1.0 if lc else 0.0))
    if grid in ("full", "wc"):
        for w in w_c_values:
            if w < 0:
                raise ConfigError(f"w_c values must be >= 0, got {w}")
            rows.append(AblationSetting(f"w_c={float(w):g}", True, True, w > 0, float(w)))
    return rows


def run_ablation(settings: Sequence[AblationSetting], base_config: dict, seeds: Sequence[int],
                 run_row: Callable[[dict, int], dict]) -> list[dict]:
    """``run_row(effective_config, seed)`` trains and scores one cell and returns its metrics."""
    rows = []
    for setting in settings:
        for seed in seeds:
            cfg = {**base_config, **setting.overrides(), "SEED": int(seed)}
            metrics = run_row(cfg, int(seed))
            row = {
                "setting": setting.name,
                **{k: v for k, v in asdict(setting).items() if k != "name"},
                "w_c": cfg["W_C"],
                "mode": setting.mode,
                "seed": int(seed),
                "config_hash": config_hash(cfg),
                **metrics,
            }
            rows.append(row)
            log.info("ablate.row setting=%s seed=%d hash=%s", setting.name, seed, row["config_hash"][:12])
    return rows
