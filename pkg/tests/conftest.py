import numpy as np
import pytest

from dcrlab import isa
from dcrlab.bitmaps import PermissionBitmaps
from dcrlab.program.generator import GeneratorSpec, generate
from dcrlab.program.image import DATA_BASE, TEXT_BASE, BasicBlock, BinaryImage, Function


def asm_image(src: str, data: bytes = b"\0" * 64) -> tuple[BinaryImage, dict[str, int]]:
    """A block-less image around hand-written code, enough for the process model."""
    code, labels = isa.assemble(src, base=TEXT_BASE)
    return BinaryImage(text=code, data=data, blocks=[], functions=[]), labels


def cfg_image(src: str, layout, params: int = 0) -> tuple[BinaryImage, dict[str, int]]:
    """One function whose blocks run from each named label to the next.

    ``layout`` is a list of (label, kind, [(target label, edge label), ...]).
    """
    code, labels = isa.assemble(src, base=TEXT_BASE)
    names = [n for n, _, _ in layout]
    ids = {n: i for i, n in enumerate(names)}
    blocks = []
    for i, (name, kind, succ) in enumerate(layout):
        start = labels[name]
        end = labels[names[i + 1]] if i + 1 < len(names) else TEXT_BASE + len(code)
        blocks.append(BasicBlock(i, start, end - start, 0, kind, tuple((ids[t], lab, 0) for t, lab in succ)))
    fn = Function(0, 0, list(range(len(blocks))), param_count=params, exported=True)
    img = BinaryImage(text=code, data=b"\0" * 16, blocks=blocks, functions=[fn], entry_points=[0])
    img.validate()
    return img, labels


def bitmaps_for(n: int, code=(), data=()) -> PermissionBitmaps:
    c = np.zeros(n, dtype=bool)
    d = np.zeros(n, dtype=bool)
    for lo, hi in code:
        c[lo:hi] = True
    for lo, hi in data:
        d[lo:hi] = True
    return PermissionBitmaps(c, d)


@pytest.fixture(scope="session")
def small_image():
    return generate(GeneratorSpec(block_count=600, seed=7))


@pytest.fixture(scope="session")
def xul_image():
    """The bundled browser-library sized spec, generated once per session."""
    from dcrlab.program.generator import bundled_spec
    return generate(bundled_spec("xul-like"))


@pytest.fixture(scope="session")
def mid_image():
    return generate(GeneratorSpec(block_count=3000, seed=11))


__all__ = ["asm_image", "bitmaps_for", "cfg_image", "TEXT_BASE", "DATA_BASE"]
