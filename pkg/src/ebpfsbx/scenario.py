"""Scenario configuration and world assembly.

A scenario is one self-contained JSON document: map declarations, kernel
object descriptors and instances (with initial field values and reference
links), the context spec, the enabled helper set, core count, the planted
secret, and optional cost-unit overrides.  Building a world instantiates
all of it in a fresh simulated address space in a fixed order, so the same
scenario always produces byte-identical layouts.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .analyze import AnalysisEnv, CtxFieldDecl
from .context import (
    ContextSpec,
    FieldDecl,
    KernelObject,
    KernelObjectDescriptor,
    MirroredField,
    TagPool,
)
from .errors import ConfigError
from .maps import create_array_map
from .memory import GRANULE, SimAddressSpace, strip_tag
from .sandbox import Mode, PAGE_SIZE, SandboxPool, STACK_SIZE

__all__ = ["ScenarioConfig", "World", "load_scenario", "parse_scenario"]

_EDGE_BUFFER = 16  # injection sampling stays this far from region edges

DEFAULT_COST_UNITS = {
    "alu": 1,
    "mem": 3,
    "tag_load_analog": 3,
    "address_form": 0,
    "ctx_byte": 1,
    "heap_alloc": 2,
    "sync_entry": 2,
    "sandbox_acquire": 6,
    "sandbox_release": 2,
    "sandbox_enter": 2,
    "sandbox_exit": 2,
    "tag_granule": 2,
    "helper_default": 8,
    "helper": {1: 8, 2: 8, 3: 16, 4: 4, 5: 4, 6: 12},
}


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    arena_size: int = 1 << 20
    cores: int = 1
    sandbox_tag: int = 0x4
    helpers_enabled: tuple = (1, 2, 3, 4, 5, 6)
    maps: tuple = ()  # (id, value_size, max_entries)
    descriptors: tuple = ()
    objects: tuple = ()  # (name, descriptor, init dict, refs dict)
    context_name: str = ""
    context_object: str = ""
    context_fields: tuple = ()
    secret_len: int = 64
    seed: int = 0
    time_base: int = 1000
    time_step: int = 7
    cost_units: dict = field(default_factory=dict)


def parse_scenario(doc, name="scenario"):
    """Validate a scenario JSON document into a ScenarioConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")

    def bad(msg):
        raise ConfigError(f"scenario {name}: {msg}")

    maps = []
    for m in doc.get("maps", []):
        try:
            maps.append((int(m["id"]), int(m["value_size"]), int(m["max_entries"])))
        except (KeyError, TypeError, ValueError):
            bad(f"bad map declaration {m!r}")
    if len({m[0] for m in maps}) != len(maps):
        bad("duplicate map ids")

    descriptors = []
    for d in doc.get("descriptors", []):
        try:
            fields = tuple(
                FieldDecl(
                    name=f["name"],
                    offset=int(f["offset"]),
                    size=int(f["size"]),
                    kind=f.get("kind", "scalar"),
                    target=f.get("target", ""),
                )
                for f in d["fields"]
            )
            descriptors.append(
                KernelObjectDescriptor(name=d["name"], size=int(d["size"]), fields=fields)
            )
        except (KeyError, TypeError, ValueError) as e:
            bad(f"bad descriptor {d.get('name', '?')!r}: {e}")
    desc_names = {d.name for d in descriptors}
    for d in descriptors:
        for f in d.fields:
            if f.is_reference and f.target not in desc_names:
                bad(f"descriptor {d.name}: reference {f.name} targets unknown "
                    f"descriptor {f.target!r}")

    objects = []
    for o in doc.get("kernel_objects", []):
        try:
            objects.append(
                (o["name"], o["descriptor"], dict(o.get("init", {})), dict(o.get("refs", {})))
            )
        except (KeyError, TypeError):
            bad(f"bad kernel object {o!r}")
        if objects[-1][1] not in desc_names:
            bad(f"object {objects[-1][0]}: unknown descriptor {objects[-1][1]!r}")

    ctx = doc.get("context")
    ctx_name = ctx_obj = ""
    ctx_fields = ()
    if ctx:
        try:
            ctx_name = ctx["name"]
            ctx_obj = ctx["object"]
            ctx_fields = tuple(
                MirroredField(
                    name=f["name"],
                    ctx_offset=int(f["ctx_offset"]),
                    path=tuple(str(f["path"]).split(".")),
                    size=int(f["size"]),
                    access=f.get("access", "r"),
                )
                for f in ctx.get("fields", [])
            )
        except (KeyError, TypeError, ValueError) as e:
            bad(f"bad context spec: {e}")
        if ctx_obj not in {o[0] for o in objects}:
            bad(f"context object {ctx_obj!r} is not declared")
        for f in ctx_fields:
            if f.access not in ("r", "w", "rw"):
                bad(f"context field {f.name}: bad access {f.access!r}")

    cores = int(doc.get("cores", 1))
    if cores < 1:
        bad("cores must be at least 1")
    tag = int(doc.get("sandbox_tag", 0x4))
    if not 1 <= tag <= 0xD:
        bad("sandbox_tag must lie in 1..13 (0xE/0xF are reserved)")

    secret = doc.get("secret", {}) or {}
    return ScenarioConfig(
        name=name,
        arena_size=int(doc.get("arena_size", 1 << 20)),
        cores=cores,
        sandbox_tag=tag,
        helpers_enabled=tuple(int(h) for h in doc.get("helpers_enabled", (1, 2, 3, 4, 5, 6))),
        maps=tuple(maps),
        descriptors=tuple(descriptors),
        objects=tuple(objects),
        context_name=ctx_name,
        context_object=ctx_obj,
        context_fields=ctx_fields,
        secret_len=int(secret.get("len", 64)),
        seed=int(doc.get("seed", 0)),
        time_base=int(doc.get("time_base", 1000)),
        time_step=int(doc.get("time_step", 7)),
        cost_units=dict(doc.get("cost_units", {})),
    )


def load_scenario(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot load scenario {path}: {e}") from None
    return parse_scenario(doc, name=str(path))


def _round_granule(n):
    return (n + GRANULE - 1) & ~(GRANULE - 1)


class World:
    """A scenario instantiated in a fresh address space for one mode."""

    def __init__(self, config, mode):
        if not isinstance(mode, Mode):
            raise ConfigError(f"unsupported mode {mode!r}")
        self.config = config
        self.mode = mode
        self.space = SimAddressSpace(size=config.arena_size)
        self.descriptors = {d.name: d for d in config.descriptors}
        self.objects = {}
        self.objects_by_addr = {}
        self.maps = {}
        self.tag_pool = TagPool()
        self.helpers_enabled = frozenset(config.helpers_enabled)

        # Fixed build order: objects, secret, maps, baseline stacks, sandbox
        # pages.  Everything is granule-aligned and granule-padded.
        for name, desc_name, init, refs in config.objects:
            desc = self.descriptors[desc_name]
            base = self.space.alloc(_round_granule(desc.size), align=GRANULE)
            obj = KernelObject(name=name, descriptor=desc, base=base)
            self.objects[name] = obj
            self.objects_by_addr[base] = obj
        for name, desc_name, init, refs in config.objects:
            obj = self.objects[name]
            for fname, value in init.items():
                fdecl = obj.descriptor.field(fname)
                self.space.write(obj.field_addr(fdecl), fdecl.size, int(value))
            for fname, target in refs.items():
                fdecl = obj.descriptor.field(fname)
                if not fdecl.is_reference:
                    raise ConfigError(f"{name}.{fname} is not a reference field")
                if target not in self.objects:
                    raise ConfigError(f"{name}.{fname} links unknown object {target!r}")
                self.space.write(obj.field_addr(fdecl), 8, self.objects[target].base)

        rng = random.Random(config.seed ^ 0x5EC7E7)
        self.secret_base = self.space.alloc(_round_granule(config.secret_len), align=GRANULE)
        self.secret = bytes(rng.randrange(1, 256) for _ in range(config.secret_len))
        self.space.write_bytes(self.secret_base, self.secret)

        for map_id, value_size, max_entries in sorted(config.maps):
            self.maps[map_id] = create_array_map(
                self.space, map_id, value_size, max_entries,
                tagged=mode.tagged, sandbox_tag=config.sandbox_tag,
            )

        self.baseline_stacks = {}
        for core in range(config.cores):
            self.baseline_stacks[core] = self.space.alloc(STACK_SIZE, align=GRANULE)

        self.pool = SandboxPool(self.space, config.sandbox_tag)
        for core in range(config.cores):
            self.pool.ensure_page(core)

        self.ctx_spec = None
        self.ctx_object = None
        if config.context_fields or config.context_name:
            self.ctx_spec = ContextSpec(name=config.context_name, fields=config.context_fields)
            self.ctx_object = self.objects[config.context_object]

        units = dict(DEFAULT_COST_UNITS)
        helper_units = dict(DEFAULT_COST_UNITS["helper"])
        for key, value in config.cost_units.items():
            if key == "helper":
                helper_units.update({int(k): int(v) for k, v in value.items()})
            elif key in units:
                units[key] = int(value)
            else:
                raise ConfigError(f"unknown cost unit {key!r}")
        units["helper"] = helper_units
        self.cost_units = units

    # -- derived views -------------------------------------------------------

    def analysis_env(self):
        ctx_fields = tuple(
            CtxFieldDecl(
                ctx_offset=f.ctx_offset,
                size=f.size,
                is_reference=self._path_is_reference(f),
            )
            for f in (self.ctx_spec.fields if self.ctx_spec else ())
        )
        return AnalysisEnv(map_ids=frozenset(self.maps), ctx_fields=ctx_fields)

    def _path_is_reference(self, mirrored):
        obj = self.ctx_object
        desc = obj.descriptor
        for i, name in enumerate(mirrored.path):
            fdecl = desc.field(name)
            if i == len(mirrored.path) - 1:
                return fdecl.is_reference
            if not fdecl.is_reference:
                return False
            desc = self.descriptors[fdecl.target]
        return False

    def components(self, core_id):
        """Guest-reachable regions for one core: guest partition plus maps."""
        page = self.pool.page_for_core(core_id)
        out = {("private",): (page + 2048, 2048)}
        for map_id, desc in self.maps.items():
            out[("map", map_id)] = (desc.base, desc.region_size)
        return out

    def digest_exclusions(self):
        """Regions legitimate runs may mutate; everything else must stay put.

        Maskable components include their trailing spill granule: a masked
        store at the final region byte may write up to 7 bytes into it.
        """
        spans = []
        for core, page in self.pool._pages.items():
            spans.append((page, PAGE_SIZE + GRANULE))
        for desc in self.maps.values():
            spans.append((desc.base, desc.region_size + GRANULE))
            spans.append(desc.metadata_range())
        for obj in self.objects.values():
            spans.append((obj.base, _round_granule(obj.descriptor.size)))
        for core, base in self.baseline_stacks.items():
            spans.append((base, STACK_SIZE))
        return spans

    def injection_keepout(self):
        """Exclusion spans padded so outcomes classify crisply at the edges.

        The planted secret is deliberately not here: it is a legitimate
        injection target and the digest covers it.
        """
        spans = []
        for start, length in self.digest_exclusions():
            spans.append((strip_tag(start) - _EDGE_BUFFER, length + 2 * _EDGE_BUFFER))
        return spans

    def snapshot(self):
        return self.space.snapshot(exclude=self.digest_exclusions())

    def secret_bytes_now(self):
        return self.space.read_bytes(self.secret_base, self.config.secret_len)
