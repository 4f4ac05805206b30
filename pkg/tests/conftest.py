import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def engine_observables(world, result):
    """Guest-visible outcome of an engine run, reference fields blanked.

    Kernel-object reference fields hold arena addresses (the oracle uses
    synthetic handles there), so they are excluded from state comparison;
    everything else must match byte for byte.
    """
    maps = {
        mid: bytes(world.space.read_bytes(d.base, d.region_size))
        for mid, d in world.maps.items()
    }
    objects = {}
    for name, obj in world.objects.items():
        buf = bytearray(world.space.read_bytes(obj.base, obj.descriptor.size))
        for f in obj.descriptor.fields:
            if f.is_reference:
                buf[f.offset : f.offset + f.size] = bytes(f.size)
        objects[name] = bytes(buf)
    return (result.r0, tuple(bytes(e) for e in result.log), maps, objects)


def oracle_observables(oracle):
    return (oracle.r0, tuple(oracle.log), dict(oracle.maps), dict(oracle.objects))
