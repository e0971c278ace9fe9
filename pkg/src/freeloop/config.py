"""INI run configuration with environment overrides.

Sections ``[system]`` and ``[run]``.  Any key can be overridden by an
environment variable ``LOOPSOLVE_<SECTION>_<KEY>`` (upper case), e.g.
``LOOPSOLVE_RUN_K=1.5``.  Fourier fields are written as ``;``-separated
terms ``amplitude cos|sin n1 n2``, optionally with a ``const c`` term.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

ENV_PREFIX = "LOOPSOLVE_"
SYSTEM_KINDS = ("mechanical", "magnetic", "reeb", "free", "custom")


class ConfigError(ValueError):
    """Malformed configuration; the message names the field and line."""

    def __init__(self, msg, field_name=None, line=None, reason="config-invalid"):
        where = ""
        if field_name:
            where += f" field={field_name}"
        if line is not None:
            where += f" line={line}"
        super().__init__(f"{msg}{where}")
        self.field = field_name
        self.line = line
        self.reason = reason


@dataclass
class RunConfig:
    system: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)
    source: str = "<defaults>"
    lines: dict = field(default_factory=dict)

    # typed accessors ------------------------------------------------
    def _raw(self, key, section="run"):
        return (self.system if section == "system" else self.run).get(key)

    def _fail(self, msg, key, section="run", reason="config-invalid"):
        env = self.lines.get((section, key))
        if isinstance(env, str):
            raise ConfigError(f"{msg} (from {env})", f"{section}.{key}", None, reason)
        raise ConfigError(msg, f"{section}.{key}", env, reason)

    def get_float(self, key, default=None, section="run", positive=False):
        raw = self._raw(key, section)
        if raw is None:
            if default is None:
                self._fail("missing required value", key, section, "config-missing-field")
            return float(default)
        try:
            val = float(raw)
        except ValueError:
            self._fail(f"not a number: {raw!r}", key, section)
        if positive and not val > 0:
            self._fail(f"must be positive, got {raw}", key, section)
        return val

    def get_int(self, key, default=None, section="run", minimum=None):
        raw = self._raw(key, section)
        if raw is None:
            if default is None:
                self._fail("missing required value", key, section, "config-missing-field")
            return int(default)
        try:
            val = int(raw)
        except ValueError:
            self._fail(f"not an integer: {raw!r}", key, section)
        if minimum is not None and val < minimum:
            self._fail(f"must be >= {minimum}, got {raw}", key, section)
        return val

    def get_str(self, key, default=None, section="run", choices=None):
        raw = self._raw(key, section)
        if raw is None:
            if default is None:
                self._fail("missing required value", key, section, "config-missing-field")
            raw = default
        if choices is not None and raw not in choices:
            self._fail(f"expected one of {', '.join(choices)}, got {raw!r}", key, section)
        return raw

    def get_vector(self, key, default=None, section="run", dim=None):
        raw = self._raw(key, section)
        if raw is None:
            if default is None:
                self._fail("missing required value", key, section, "config-missing-field")
            return list(default)
        try:
            vals = [float(x) for x in raw.replace(",", " ").split()]
        except ValueError:
            self._fail(f"not a list of numbers: {raw!r}", key, section)
        if dim is not None and len(vals) != dim:
            self._fail(f"expected {dim} numbers, got {len(vals)}", key, section)
        return vals

    def has(self, key, section="run"):
        return self._raw(key, section) is not None

    def terms(self, key, dim=2, section="system"):
        """Parse a Fourier field description into (terms, const) or None when absent."""
        raw = self._raw(key, section)
        if raw is None:
            return None
        terms, const = [], 0.0
        for chunk in raw.split(";"):
            parts = chunk.split()
            if not parts:
                continue
            try:
                if parts[0] == "const" and len(parts) == 2:
                    const += float(parts[1])
                    continue
                if len(parts) != 2 + dim or parts[1] not in ("cos", "sin"):
                    raise ValueError
                terms.append((float(parts[0]), parts[1], tuple(int(p) for p in parts[2:])))
            except ValueError:
                self._fail(f"bad Fourier term {chunk.strip()!r} (want 'amp cos|sin n1 .. nd')", key, section)
        return terms, const

    def check_tolerances(self):
        for key, val in self.run.items():
            if key.endswith("tol"):
                self.get_float(key, positive=True)


def _line_numbers(text):
    """(section, key) -> 1-based line number, for error messages."""
    out = {}
    section = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip().lower()
            out[(section, None)] = i
        elif section and ("=" in s or ":" in s):
            key = s.split("=", 1)[0] if "=" in s else s.split(":", 1)[0]
            out[(section, key.strip().lower())] = i
    return out


def load_config(path=None, environ=None) -> RunConfig:
    """Read an INI file (optional) and apply environment overrides."""
    environ = os.environ if environ is None else environ
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    lines = {}
    source = "<defaults>"
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}", reason="config-unreadable") from None
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            if line is None and getattr(exc, "errors", None):
                line = exc.errors[0][0]
            raise ConfigError(f"malformed config: {exc.message.splitlines()[0]}", line=line, reason="config-syntax") from None
        lines = _line_numbers(text)
        source = str(path)
        unknown = [s for s in cp.sections() if s not in ("system", "run")]
        if unknown:
            raise ConfigError(f"unknown section [{unknown[0]}]", line=lines.get((unknown[0], None)), reason="config-invalid")
    system = dict(cp["system"]) if cp.has_section("system") else {}
    run = dict(cp["run"]) if cp.has_section("run") else {}
    for name, val in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        for sec, store in (("system_", system), ("run_", run)):
            if rest.startswith(sec):
                key = rest[len(sec) :]
                store[key] = val
                lines[(sec[:-1], key)] = name
    cfg = RunConfig(system, run, source, lines)
    kind = cfg.get_str("kind", "mechanical", "system", SYSTEM_KINDS)
    cfg.system["kind"] = kind
    cfg.check_tolerances()
    return cfg


def build_system(cfg: RunConfig):
    """Lagrangian described by the [system] section."""
    from .systems import FourierField, FourierLagrangian, TorusManifold, free_particle, magnetic, mechanical, reeb

    kind = cfg.get_str("kind", "mechanical", "system", SYSTEM_KINDS)
    R = cfg.get_float("R".lower(), 100.0, "system", positive=True)
    dim = cfg.get_int("dim", 2, "system", minimum=2)

    def fld(key):
        spec = cfg.terms(key, dim)
        if spec is None:
            return None
        terms, const = spec
        return FourierField.from_terms(dim, terms, const)

    conf = fld("conformal")
    manifold = TorusManifold(dim, conf) if conf is not None else TorusManifold(dim)
    if kind == "mechanical":
        return mechanical(fld("potential"), dim=dim, R=R, manifold=manifold)
    if kind == "magnetic":
        return magnetic(cfg.get_float("epsilon", 2.0, "system"), R=R)
    if kind == "reeb":
        return reeb(R=R)
    if kind == "free":
        if conf is None:
            return free_particle(dim, R=R)
        return FourierLagrangian(manifold, R=R, name="free")
    psi = fld("psi")
    A = [fld(f"a{i + 1}") for i in range(dim)]
    if all(a is None for a in A):
        A = None
    else:
        A = [a if a is not None else FourierField.zero(dim) for a in A]
    return FourierLagrangian(manifold, psi, A, R=R, name="custom")
