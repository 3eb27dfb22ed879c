"""The seven personalised FL strategies behind one runtime contract."""

from __future__ import annotations

from dataclasses import fields
from typing import Any, Mapping

from ..errors import ConfigError
from .apple import Apple, AppleParams, AppleState
from .base import (
    ClientResult,
    Personalized,
    RoundMessage,
    RunContext,
    Strategy,
    aggregate_prototypes,
    class_means,
    weighted_average,
)
from .fedala import AlaParams, AlaState, FedAla
from .fedbabu import BabuParams, BabuState, FedBabu
from .fedgc import FedGc, GcParams, GcState
from .fedpac import FedPac, PacParams, PacState
from .fedpcl import FedPcl, PclParams, PclState
from .fedproto import FedProto, ProtoParams, ProtoState

REGISTRY: dict[str, tuple[type[Strategy], type]] = {
    "apple": (Apple, AppleParams),
    "fedala": (FedAla, AlaParams),
    "fedbabu": (FedBabu, BabuParams),
    "fedgc": (FedGc, GcParams),
    "fedpac": (FedPac, PacParams),
    "fedpcl": (FedPcl, PclParams),
    "fedproto": (FedProto, ProtoParams),
}

STRATEGY_NAMES = tuple(REGISTRY)


def make_strategy(name: str, params: Mapping[str, Any] | None = None) -> Strategy:
    if name not in REGISTRY:
        raise ConfigError(f"unknown strategy {name!r}; choose one of: {', '.join(STRATEGY_NAMES)}")
    cls, params_cls = REGISTRY[name]
    params = dict(params or {})
    allowed = {f.name for f in fields(params_cls)}
    unknown = sorted(set(params) - allowed)
    if unknown:
        raise ConfigError(f"strategy.params: unknown key(s) {unknown} for {name!r}; allowed: {sorted(allowed)}")
    return cls(params_cls(**params))


__all__ = [
    "REGISTRY",
    "STRATEGY_NAMES",
    "make_strategy",
    "Strategy",
    "RoundMessage",
    "RunContext",
    "ClientResult",
    "Personalized",
    "weighted_average",
    "aggregate_prototypes",
    "class_means",
    "Apple",
    "AppleParams",
    "AppleState",
    "FedAla",
    "AlaParams",
    "AlaState",
    "FedBabu",
    "BabuParams",
    "BabuState",
    "FedGc",
    "GcParams",
    "GcState",
    "FedPac",
    "PacParams",
    "PacState",
    "FedPcl",
    "PclParams",
    "PclState",
    "FedProto",
    "ProtoParams",
    "ProtoState",
]
