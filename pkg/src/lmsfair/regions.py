"""Philippine region codes and the five island-group clusters used as
demographic groups."""

from enum import Enum


class RegionCode(str, Enum):
    """The 17 PSA regions plus ABROAD, in canonical (tie-break) order."""

    NCR = "NCR"
    CAR = "CAR"
    R01 = "R01"
    R02 = "R02"
    R03 = "R03"
    R04A = "R04A"
    R04B = "R04B"
    R05 = "R05"
    R06 = "R06"
    R07 = "R07"
    R08 = "R08"
    R09 = "R09"
    R10 = "R10"
    R11 = "R11"
    R12 = "R12"
    R13 = "R13"
    BARMM = "BARMM"
    ABROAD = "ABROAD"


class RegionCluster(str, Enum):
    NCR = "NCR"
    LUZON = "Luzon"
    MINDANAO = "Mindanao"
    VISAYAS = "Visayas"
    ABROAD = "Abroad"


REGION_ORDER = {code: i for i, code in enumerate(RegionCode)}
CLUSTER_ORDER = list(RegionCluster)

_CLUSTER_MEMBERS = {
    RegionCluster.NCR: ("NCR",),
    RegionCluster.LUZON: ("CAR", "R01", "R02", "R03", "R04A", "R04B", "R05"),
    RegionCluster.VISAYAS: ("R06", "R07", "R08"),
    RegionCluster.MINDANAO: ("R09", "R10", "R11", "R12", "R13", "BARMM"),
    RegionCluster.ABROAD: ("ABROAD",),
}

REGION_TO_CLUSTER = {
    RegionCode(code): cluster
    for cluster, codes in _CLUSTER_MEMBERS.items()
    for code in codes
}

CLUSTER_REGIONS = {
    cluster: tuple(RegionCode(c) for c in codes)
    for cluster, codes in _CLUSTER_MEMBERS.items()
}

# Students per cluster in the studied cohort; default synthetic mix.
STUDY_CLUSTER_COUNTS = {
    RegionCluster.NCR: 4816,
    RegionCluster.LUZON: 580,
    RegionCluster.MINDANAO: 138,
    RegionCluster.VISAYAS: 131,
    RegionCluster.ABROAD: 49,
}


def parse_region(text):
    try:
        return RegionCode(text.strip().upper())
    except ValueError:
        raise ValueError(f"unknown region code {text!r}") from None


def parse_cluster(text):
    for cluster in RegionCluster:
        if text.strip().lower() in (cluster.value.lower(), cluster.name.lower()):
            return cluster
    raise ValueError(f"unknown region cluster {text!r}")
