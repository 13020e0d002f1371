from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class CorrectionConfig:
    max_sweeps: int = 100
    stiefel_max_iters: int = 200
    stiefel_grad_tol: float = 1e-10
    scqp_lambda_tol: float = 1e-10
    sweep_ss_rel_tol: float = 1e-6
    rotation_sweeps: int = 1
    apply_balanced_norm_first: bool = True
    apply_intensity_first: bool = False

    def __post_init__(self):
        for name in ("stiefel_grad_tol", "scqp_lambda_tol", "sweep_ss_rel_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_sweeps < 1 or self.stiefel_max_iters < 0 or self.rotation_sweeps < 0:
            raise ValueError("iteration counts must be non-negative (max_sweeps >= 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionConfig":
        d = dict(d)
        if "intensity_first" in d:
            d["apply_intensity_first"] = d.pop("intensity_first")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown correction config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)
