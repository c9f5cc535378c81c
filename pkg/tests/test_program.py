import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TEXT_BASE, asm_image, cfg_image
from dcrlab import isa
from dcrlab.program import container
from dcrlab.program.cfg import NoPath, find_path, path_graph, replay
from dcrlab.program.gadgets import brute_force_gadgets, classify, extract_gadgets, gadget_table
from dcrlab.program.generator import (BlockSizeDist, GeneratorSpec, InfeasibleSpec, SpecSyntaxError, bundled_spec,
                                      generate, parse_spec, realized_size_cdf)
from dcrlab.program.image import BasicBlock, BinaryImage, Function, ImageError
from dcrlab.program.templates import templates_at, window_fits

# ------------------------------------------------------------- generator


def test_single_block_image():
    img = generate(GeneratorSpec(block_count=1, seed=0))
    img.validate()
    assert len(img.blocks) == 1 and len(img.functions) == 1
    assert img.blocks[0].kind == "return"


def test_generation_is_deterministic():
    a = generate(GeneratorSpec(block_count=400, seed=9))
    b = generate(GeneratorSpec(block_count=400, seed=9))
    c = generate(GeneratorSpec(block_count=400, seed=10))
    assert container.dumps(a) == container.dumps(b) != container.dumps(c)


@pytest.mark.parametrize("kw", [dict(data_in_code_ratio=1.5), dict(data_in_code_ratio=1.0),
                                dict(block_count=0), dict(function_blocks_mean=0.5)])
def test_infeasible_specs(kw):
    with pytest.raises(InfeasibleSpec):
        generate(GeneratorSpec(**kw))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 400))
def test_generated_images_satisfy_invariants(seed, blocks):
    img = generate(GeneratorSpec(block_count=blocks, seed=seed))
    img.validate()
    entries = {img.entry_address(f.id) for f in img.functions}
    for t in img.pointer_tables:
        for k in range(len(t.entries)):
            (w,) = struct.unpack_from("<I", img.data, t.offset + 4 * k)
            assert w in entries
    listed = set(img.entry_points) | {f for t in img.pointer_tables for f in t.entries}
    for f in img.functions:
        if f.exported:
            assert f.id in listed
        assert f.param_order == tuple(range(f.param_count)) and 0 <= f.param_count <= 4
    for b in img.blocks:
        ins = img.instructions(b.id)
        assert ins[-1].is_terminator and not any(i.is_terminator for i in ins[:-1])


def test_function_blocks_connected_from_entry(mid_image):
    img = mid_image
    for f in img.functions[:200]:
        seen, todo = {f.entry}, [f.entry]
        while todo:
            b = img.blocks[todo.pop()]
            for d, lab, _ in b.succs:
                if lab in ("jump", "true", "false", "fallthrough", "table") and d not in seen \
                        and img.blocks[d].function == f.id:
                    seen.add(d)
                    todo.append(d)
        assert seen == set(f.blocks)


def test_xul_like_statistics(xul_image):
    img = xul_image
    emb = sum(ln for _, ln in img.embedded) / len(img.text)
    assert abs(emb - 0.0162) <= 0.002
    dist = bundled_spec("xul-like").block_size
    for n in (5, 10, 20, 40):
        assert abs(realized_size_cdf(img, n) - dist.cdf(n)) < 0.01
    assert 0.15 <= dist.cdf(5) <= 0.25 and 0.45 <= dist.cdf(10) <= 0.55


def test_gapless_ratio_stable_across_seeds(xul_image):
    other = generate(GeneratorSpec(**{**bundled_spec("xul-like").to_dict(), "seed": 99,
                                      "block_size": BlockSizeDist()}))
    ratios = [float(gadget_table(i).gapless.mean()) for i in (xul_image, other)]
    assert abs(ratios[0] - ratios[1]) <= 0.02


def test_spec_parser_reports_lines():
    with pytest.raises(SpecSyntaxError) as e:
        parse_spec("seed: 1\nblock_count: 10\nbogus: 3\n")
    assert e.value.line == 3
    with pytest.raises(SpecSyntaxError) as e:
        parse_spec("seed: [1,\n")
    assert e.value.line is not None
    assert parse_spec("").block_count == GeneratorSpec().block_count


# ---------------------------------------------------------------- gadgets

def _small_images():
    for seed in range(6):
        img = generate(GeneratorSpec(block_count=120, seed=seed))
        assert len(img.text) <= 4096
        yield img


def test_gadgets_match_brute_force_decoder():
    for img in _small_images():
        fast = {(g.start - img.text_base, len(g.instructions)) for g in extract_gadgets(img)}
        slow = {(s, len(seq)) for s, seq in brute_force_gadgets(img.text)}
        assert fast == slow
        for g in extract_gadgets(img)[:300]:
            seq = isa.decode_all(img.text[g.start - img.text_base:g.start - img.text_base + g.byte_length])
            assert seq[-1].mnemonic in ("RET", "CALLR", "JMPR")
            assert classify(g.instructions) == g.gadget_class


def test_gadget_gapless_flag_matches_masks():
    for img in _small_images():
        t = gadget_table(img)
        un = img.unstable_bits
        for i in range(0, len(t), 7):
            s, ln = int(t.start[i]), int(t.length[i])
            assert bool(t.gapless[i]) == (not un[s:s + ln].any())


def test_single_ret_gadgets():
    img, _ = asm_image("RET")
    g = extract_gadgets(img)
    assert [(x.start, len(x.instructions)) for x in g] == [(TEXT_BASE, 1)]


def test_empty_text_has_no_gadgets():
    img = BinaryImage(text=b"", data=b"", blocks=[], functions=[])
    assert extract_gadgets(img) == []


def test_gadget_hidden_in_immediate():
    pop_ret = bytes([isa.OPCODE["POP"], 2 << 3, 0xC3, 0x00])
    imm = struct.unpack("<I", pop_ret)[0]
    img, _ = cfg_image(f"f: MOVI r1, {imm}\n RET", [("f", "return", [])])
    found = {g.start - TEXT_BASE: g for g in extract_gadgets(img)}
    g = found[2]
    assert [i.mnemonic for i in g.instructions] == ["POP", "RET"]
    assert g.gapless and g.gadget_class == "load-const"
    # a gadget starting on the MOVI register byte would cover a gap
    for off, gg in found.items():
        if off < 2:
            assert not gg.gapless


# -------------------------------------------------------------- templates

def test_template_counts():
    src = "f: MOVI r1, 0x11223344\n MOVI r2, 0x55667788\n RET"
    img, _ = cfg_image(src, [("f", "return", [])])
    n = len(img.text)
    assert len(templates_at(img, n)) == 1
    for m in (3, 6, 8):
        assert len(templates_at(img, m)) == n - m + 1


def test_identical_blocks_collide():
    src = """
a: MOVI r1, 0x11223344
   JMP8 b
b: MOVI r1, 0x11223344
   RET
"""
    img, lab = cfg_image(src, [("a", "jump", [("b", "jump")]), ("b", "return", [])])
    t = templates_at(img, 6)
    hits = t.lookup(img.text[:6])
    assert len(hits) == 2


def test_template_gap_bits_allow_register_changes():
    img, _ = cfg_image("f: MOVI r1, 0x11223344\n RET", [("f", "return", [])])
    t = templates_at(img, 6)
    leaked = bytearray(img.text[:6])
    leaked[1] = 5 << 3  # another destination register
    assert len(t.lookup(bytes(leaked))) == 1
    leaked[3] ^= 1
    assert len(t.lookup(bytes(leaked))) == 0
    tpl = t.template(0)
    assert tpl.matches(bytes(img.text[:6])) and tpl.gap_mask[1] == isa.FIELD_A


def test_windows_crossing_blocks_never_match(mid_image):
    img = mid_image
    fits = window_fits(img, 6)
    t = templates_at(img, 6)
    assert len(t) == len(img.text) - 6 + 1
    text = img.text
    for o in np.nonzero(~fits)[0][:300].tolist():
        assert o not in set(t.lookup(text[o:o + 6]).tolist())
    for o in np.nonzero(fits)[0][:300].tolist():
        assert o in set(t.lookup(text[o:o + 6]).tolist())


# ------------------------------------------------------------------ paths

DIAMOND = """
e:  JMP8 a
a:  JZ8 r0, c
b:  MOVIS r1, 1
    JMP8 d
c:  MOVIS r1, 2
    JMP8 d
d:  RET
"""
DIAMOND_LAYOUT = [("e", "jump", [("a", "jump")]), ("a", "cond-branch", [("c", "true"), ("b", "false")]),
                  ("b", "jump", [("d", "jump")]), ("c", "jump", [("d", "jump")]), ("d", "return", [])]


def test_find_path_trivial_and_diamond():
    img, lab = cfg_image(DIAMOND, DIAMOND_LAYOUT)
    assert find_path(img, lab["a"], lab["a"]) == []
    assert find_path(img, lab["e"], lab["b"]) == ["jump", "false"]
    assert find_path(img, lab["e"], lab["c"]) == ["jump", "true"]
    assert len(find_path(img, lab["e"], lab["d"])) == 3
    with pytest.raises(NoPath):
        find_path(img, lab["d"], lab["e"])


def test_find_path_straight_line():
    src = "a: NOP\n JMP8 b\nb: NOP\n JMP8 c\nc: RET"
    img, lab = cfg_image(src, [("a", "jump", [("b", "jump")]), ("b", "jump", [("c", "jump")]),
                               ("c", "return", [])])
    assert find_path(img, lab["a"], lab["c"]) == ["jump", "jump"]


def test_find_path_is_shortest_on_diamond():
    img, lab = cfg_image(DIAMOND, DIAMOND_LAYOUT)
    # every simple path e -> d has 3 edges; both branches are valid
    path = find_path(img, lab["e"], lab["d"])
    assert path[0] == "jump" and path[1] in ("true", "false") and path[2] == "jump"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_replayed_paths_land_on_target(mid_image, seed):
    img = mid_image
    pg = path_graph(img)
    rng = np.random.default_rng(seed)
    src = int(rng.integers(0, len(img.blocks)))
    order, _ = pg.tree(src)
    dst = int(order[rng.integers(0, len(order))])
    labels = find_path(img, img.blocks[src].start, img.blocks[dst].start)
    assert replay(img, src, labels) == dst


# -------------------------------------------------------------- container

def test_container_round_trip(mid_image):
    raw = container.dumps(mid_image)
    img, bm, _ = container.loads(raw)
    assert bm is None
    assert img.text == mid_image.text and img.data == mid_image.data
    assert [(b.start, b.size, b.kind, b.succs) for b in img.blocks] == \
        [(b.start, b.size, b.kind, b.succs) for b in mid_image.blocks]
    assert [f.__dict__ for f in img.functions] == [f.__dict__ for f in mid_image.functions]
    assert img.embedded == mid_image.embedded and img.entry_points == mid_image.entry_points
    assert container.dumps(img) == raw


@pytest.mark.parametrize("raw", [b"", b"junk", b"DCRL" + bytes(20)])
def test_container_rejects_garbage(raw):
    with pytest.raises(container.ContainerError):
        container.loads(raw)


def test_validate_rejects_broken_tiling():
    img, _ = asm_image("NOP\nRET")
    bad = BinaryImage(text=img.text, data=b"", blocks=[BasicBlock(0, TEXT_BASE, 1, 0, "none")],
                      functions=[Function(0, 0, [0])])
    with pytest.raises(ImageError):
        bad.validate()
