from enum import Enum, EnumMeta, IntEnum
from typing import Any


class CaseInsensitiveEnumMeta(EnumMeta):
    """Enum metaclass that resolves member names case-insensitively.

    Config files and CLI flags spell study modes and schedules in whatever
    case the user typed, so ``StudyMode["grl_mmd"]`` and
    ``StudyMode.Grl_Mmd`` both resolve to ``StudyMode.GRL_MMD``.
    """

    def __getitem__(cls, name: str) -> Any:
        return super(CaseInsensitiveEnumMeta, cls).__getitem__(name.upper())

    def __getattr__(cls, name: str) -> Enum:
        """Return the enum member matching `name`.

        :param str name: The name of the enum member to retrieve.
        :raises AttributeError: If `name` is not a valid enum member.
        """
        try:
            return cls._member_map_[name.upper()]
        except KeyError as err:
            raise AttributeError(name) from err


class StudyMode(str, Enum, metaclass=CaseInsensitiveEnumMeta):
    """Domain-adaptation study settings of the ablation grid."""

    GRL_MMD = "grl_mmd"
    """Study 1: gradient reversal plus multi-kernel MMD."""
    GRL = "grl"
    """Study 2: gradient reversal only."""
    MMD = "mmd"
    """Study 3: MMD only."""
    NONE = "none"
    """Study 4: no domain adaptation."""

    @property
    def uses_grl(self) -> bool:
        return self in (StudyMode.GRL_MMD, StudyMode.GRL)

    @property
    def uses_mmd(self) -> bool:
        return self in (StudyMode.GRL_MMD, StudyMode.MMD)

    @property
    def study_number(self) -> int:
        return list(StudyMode).index(self) + 1

    @property
    def label(self) -> str:
        return {
            StudyMode.GRL_MMD: "GRL+MMD",
            StudyMode.GRL: "GRL only",
            StudyMode.MMD: "MMD only",
            StudyMode.NONE: "No DA",
        }[self]


class LambdaSchedule(str, Enum, metaclass=CaseInsensitiveEnumMeta):
    """How the gradient-reversal strength evolves during training."""

    CONSTANT = "constant"
    RAMP = "ramp"


class Domain(IntEnum):
    """Domain class index used by the domain classifier."""

    SOURCE = 0
    TARGET = 1


class Split(str, Enum, metaclass=CaseInsensitiveEnumMeta):
    TRAIN = "train"
    VAL = "val"


class VolumeDtype(IntEnum):
    """Payload dtype codes of the ``.pfda`` container."""

    FLOAT32 = 1
    UINT8 = 2
