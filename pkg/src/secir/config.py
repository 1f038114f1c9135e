"""Session configuration: one key = value text file shared by every role.

Both servers must run byte-identical configs; the session handshake
compares SHA-256 hashes of the canonical text form.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .numeric import FixedPointConfig


@dataclass
class SessionConfig:
    # fixed-point field
    int_bits: int = 12
    frac_bits: int = 16
    delta: int = 8
    epsilon: int = 24
    eta: float = 2.0 ** -8
    truncate_wire: bool = False
    # seeds
    dealer_seed: int = 1
    owner_seed: int = 2
    index_seed: int = 3
    model_seed: int = 4
    party1_seed: int = 5
    party2_seed: int = 6
    query_seed: int = 7
    # corpus
    n_images: int = 8
    n_classes: int = 4
    image_size: int = 28
    # extractor
    model_widths: tuple = (4, 6)
    pool_mode: str = "tournament"
    # index
    index_kind: str = "hkm"
    k: int = 4
    leaf_max: int = 0  # 0 selects the 3*m default
    m_f: int = 16
    w: float = 1.0
    alpha: float = 0.5
    s: int = 2
    m: int = 2
    # transport
    backend: str = "local"
    host: str = "127.0.0.1"
    peer_port: int = 9500
    user_port_1: int = 9601
    user_port_2: int = 9602
    # dealer provisioning
    provision_factor: float = 2.0

    def __post_init__(self):
        if self.index_kind not in ("hkm", "c2lsh", "linear"):
            raise ConfigError(f"unknown index kind {self.index_kind!r}")
        if self.backend not in ("local", "tcp"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.pool_mode not in ("tournament", "sort"):
            raise ConfigError(f"unknown pool mode {self.pool_mode!r}")
        if self.m < 1:
            raise ConfigError("m must be >= 1")

    def fixed_point(self) -> FixedPointConfig:
        return FixedPointConfig(self.int_bits, self.frac_bits, self.delta,
                                self.epsilon, self.eta, self.truncate_wire)

    def effective_leaf_max(self) -> int:
        return self.leaf_max if self.leaf_max > 0 else 3 * self.m

    def party_seed(self, party) -> int:
        return self.party1_seed if int(party) == 1 else self.party2_seed

    # -- text form -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "SessionConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kwargs[key] = _coerce(known[key].type, value, key)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "SessionConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _coerce(type_name, value: str, key: str):
    name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
        if name == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if name == "tuple":
            return tuple(int(v) for v in value.split(",") if v)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
