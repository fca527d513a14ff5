"""Names for the pooled-analysis methods compared throughout the package."""

from __future__ import annotations

from enum import Enum


class PoolingMethod(Enum):
    NAIVE = "naive"
    INTERNALIZED = "internalized"
    FULL_CALIBRATION = "full"
    TWO_STAGE = "twostage"

    @property
    def is_aggregated(self) -> bool:
        return self is not PoolingMethod.TWO_STAGE

    @property
    def label(self) -> str:
        return {
            PoolingMethod.NAIVE: "Naive",
            PoolingMethod.INTERNALIZED: "Internalized",
            PoolingMethod.FULL_CALIBRATION: "Full calibration",
            PoolingMethod.TWO_STAGE: "Two-stage",
        }[self]


AGGREGATED_METHODS = (
    PoolingMethod.NAIVE,
    PoolingMethod.INTERNALIZED,
    PoolingMethod.FULL_CALIBRATION,
)

ALL_METHODS = AGGREGATED_METHODS + (PoolingMethod.TWO_STAGE,)
