from typing import Dict, Iterable, List, Optional, Union

import click

from ..enums import Modality, enum_values
from ..rca_engine import ModalityFlags


def make_mapping(mapping: Dict[str, Modality]) -> Dict[str, Modality]:
    """Make a new mapping with multiple keys for identical enums."""
    new = {}
    for key, enum in mapping.items():
        new[enum.value] = enum          # add Enum value as key
        new[enum.name.lower()] = enum   # add Enum name as key
        new[key] = enum                 # add existing key from mapping
    return new


_modalities = {
    "l": Modality.LOG,
    "t": Modality.TRACE,
    "m": Modality.METRIC,
    "logs": Modality.LOG,
    "traces": Modality.TRACE,
    "metrics": Modality.METRIC,
}

MODALITIES: Dict[str, Modality] = make_mapping(_modalities)
ALL_MODALITIES = ("all", "a")


def parse_arg_modalities(value: Union[str, Iterable[str], None]) -> List[Modality]:
    """Parses the `--modalities` argument.

    Accepts a comma-separated string or a list of names, single-letter
    aliases included. Returns modalities in canonical order.
    """
    if value is None:
        return []
    if isinstance(value, str):
        value = value.split(",")
    names = [v.strip().lower() for v in value if v and v.strip()]
    if any(n in ALL_MODALITIES for n in names):
        return list(Modality)
    unknown = [n for n in names if n not in MODALITIES]
    if unknown:
        raise click.BadParameter(
            f"unknown modality {', '.join(repr(u) for u in unknown)} "
            f"(choose from {', '.join(enum_values(Modality))})"
        )
    chosen = {MODALITIES[n] for n in names}
    return [m for m in Modality if m in chosen]


def parse_flags(value: Union[str, Iterable[str], None]) -> Optional[ModalityFlags]:
    """None when no modalities are given, so the config decides."""
    modalities = parse_arg_modalities(value)
    if value is not None and not modalities:
        raise click.BadParameter("at least one modality must be enabled")
    return ModalityFlags.of(modalities) if modalities else None


def modalities_callback(ctx: click.Context, param: click.Parameter, value) -> Optional[ModalityFlags]:
    return parse_flags(value)
