
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TEXT_BASE, asm_image, bitmaps_for
from oracle import Oracle
from dcrlab import enforcer, isa
from dcrlab.enforcer import SimProcess, load, policy_classes

GARBLE = isa.GARBLE_BYTE

# three bytes of code we can both read and run: MOVIS r0, 5 / RET
PROG = """
f: MOVIS r0, 5
   RET
"""


def proc(bits, policy="bgdx", src=PROG):
    img, labels = asm_image(src)
    n = len(img.text)
    bm = bitmaps_for(n, code=[(0, n)] if bits == "xom" else (), data=[(0, n)] if bits == "ro" else ())
    return SimProcess(img, bm, policy), img, labels


# ------------------------------------------------------ policy table cells

def test_xom_data_fetch_terminates():
    p, img, _ = proc("xom")
    assert p.data_fetch(TEXT_BASE, 1) is None
    assert p.status == "crashed" and p.reason == "xom-read"


def test_xom_instruction_fetch_allowed():
    p, _, lab = proc("xom")
    s = p.run(lab["f"])
    assert s.status == "exited" and s.regs[0] == 5


def test_ro_data_fetch_reads_data_view():
    p, img, _ = proc("ro")
    first = p.data_fetch(TEXT_BASE, 3)
    assert first == img.text[:3]
    assert p.data_fetch(TEXT_BASE, 3) == first
    assert p.status == "running"


def test_ro_instruction_fetch_terminates():
    p, _, lab = proc("ro")
    s = p.run(lab["f"])
    assert s.status == "crashed" and s.reason == "ro-execute"


def test_dcr_data_fetch_garbles_code_view():
    p, img, _ = proc("dcr")
    assert p.data_fetch(TEXT_BASE, 2) == img.text[:2]
    assert p.code_view[:2] == bytes([GARBLE, GARBLE])
    assert p.garbled_set == {TEXT_BASE, TEXT_BASE + 1}


def test_dcr_instruction_fetch_allowed_before_read():
    p, _, lab = proc("dcr")
    assert p.run(lab["f"]).status == "exited"


def test_dcr_execute_then_read_is_allowed():
    p, img, lab = proc("dcr")
    assert p.run(lab["f"]).status == "exited"
    assert p.data_fetch(TEXT_BASE, 3) == img.text[:3]
    assert p.status == "running"


def test_dcr_read_then_execute_crashes():
    p, _, lab = proc("dcr")
    p.data_fetch(TEXT_BASE, 1)
    s = p.run(lab["f"])
    assert s.status == "crashed" and s.reason == "garbled-execute"


def test_dcr_garbles_only_bytes_read():
    p, img, _ = proc("dcr")
    p.data_fetch(TEXT_BASE + 1, 1)
    assert p.code_view[0] == img.text[0] and p.code_view[1] == GARBLE and p.code_view[2] == img.text[2]


def test_mixed_fetch_with_one_xom_byte_crashes_without_garbling():
    img, lab = asm_image(PROG)
    bm = bitmaps_for(len(img.text), code=[(2, 3)])
    p = SimProcess(img, bm, "bgdx")
    assert p.data_fetch(TEXT_BASE, 3) is None
    assert p.reason == "xom-read" and not p.garbled_set


# ------------------------------------------------------------ load modes

def test_policy_none_views_identical():
    img, _ = asm_image(PROG)
    p = SimProcess(img, None, "none")
    assert bytes(p.code_view) == bytes(p.data_view) == img.text
    p.data_fetch(TEXT_BASE, 3)
    assert not p.garbled_set and bytes(p.code_view) == img.text


def test_ro_bytes_pregarbled_at_load():
    img, _ = asm_image(PROG)
    bm = bitmaps_for(len(img.text), data=[(1, 2)])
    for pol in ("bgdx", "xom-only"):
        p = SimProcess(img, bm, pol)
        assert p.code_view[1] == GARBLE and p.data_view == img.text


def test_zero_bitmaps_bgdx_equals_dcr_only():
    img, _ = asm_image(PROG)
    n = len(img.text)
    a = policy_classes(bitmaps_for(n), n, "bgdx")
    b = policy_classes(None, n, "dcr-only")
    assert (a == b).all()


def test_xom_only_leaves_uncertain_bytes_plain():
    p, img, lab = proc("dcr", policy="xom-only")
    p.data_fetch(TEXT_BASE, 3)
    assert not p.garbled_set
    assert p.run(lab["f"]).status == "exited"


# ---------------------------------------------------------------- running

JT = """
f:  MOVIS r1, 1
    JTAB r1, 2, table
table:
    .word a
    .word b
a:  MOVIS r0, 7
    SYS r0
    RET
b:  MOVIS r0, 9
    SYS r0
    RET
"""


def _jt(bits_for_table):
    img, lab = asm_image(JT)
    t0 = lab["table"] - TEXT_BASE
    n = len(img.text)
    code = [(0, t0), (t0 + 8, n)]
    data = [(t0, t0 + 8)] if bits_for_table == "data" else []
    return SimProcess(img, bitmaps_for(n, code=code, data=data), "bgdx"), lab


def test_single_ret_exits_immediately():
    img, lab = asm_image("f: RET")
    s = SimProcess(img, None, "bgdx").run(lab["f"])
    assert s.status == "exited" and s.steps == 1


def test_jump_table_marked_data_runs_cleanly():
    p, lab = _jt("data")
    for _ in range(3):
        s = p.run(lab["f"])
        assert s.status == "exited" and s.syscalls == [9]
    # the table bytes were garbled in the code view at load
    t0 = lab["table"] - TEXT_BASE
    assert set(p.code_view[t0:t0 + 8]) == {GARBLE}


def test_jump_table_left_uncertain_garbles_on_first_use():
    p, lab = _jt("uncertain")
    s = p.run(lab["f"])
    assert s.status == "exited" and s.syscalls == [9]
    # only the entry that was used is garbled
    assert p.garbled_set == set(range(lab["table"] + 4, lab["table"] + 8))
    # executing those bytes afterwards crashes
    assert p.run(lab["table"] + 4).reason == "garbled-execute"


def test_fuel_exhaustion():
    img, lab = asm_image("f: JMP8 f")
    s = SimProcess(img, None, "none").run(lab["f"], fuel=50)
    assert s.status == "fuel-exhausted" and s.steps == 50


def test_crashed_process_never_resumes():
    p, _, lab = proc("xom")
    p.data_fetch(TEXT_BASE, 1)
    for _ in range(3):
        assert p.run(lab["f"]).status == "crashed"
        assert p.data_fetch(p.data_base, 4) is None
        assert p.instruction_fetch(lab["f"]) is None
        assert p.invoke_chain([("gadget", lab["f"])], [5]).status == "crashed"
    assert p.status == "crashed"


def test_write_to_text_is_refused():
    img, lab = asm_image(f"f: MOVI r1, {TEXT_BASE}\n STORE [r1+0], r0\n RET")
    s = SimProcess(img, None, "none").run(lab["f"])
    assert s.status == "crashed" and s.reason == "write-protect"


def test_undecodable_byte_crashes():
    img, lab = asm_image("f: .word 0xFFFFFFFF")
    s = SimProcess(img, None, "none").run(lab["f"])
    assert s.reason == "decode-failure"


def test_data_section_reads_never_garble():
    img, lab = asm_image(PROG, data=bytes(range(16)))
    p = SimProcess(img, None, "dcr-only")
    assert p.data_fetch(img.data_base + 4, 4) == bytes([4, 5, 6, 7])
    assert not p.garbled_set and not p.read_set


def test_unmapped_read():
    p, _, _ = proc("dcr")
    assert p.data_fetch(0x1000, 4) is None and p.reason == "unmapped"


def test_trace_events_follow_policy():
    p, lab = _jt("data")
    p.events = []
    p.run(lab["f"])
    kinds = {(e.kind, e.verdict) for e in p.events}
    assert ("data", "redirect-to-data-view") in kinds and ("instruction", "allow") in kinds
    line = p.trace_lines()[0]
    assert set(__import__("json").loads(line)) == {"kind", "address", "length", "verdict"}


def test_record_mode_logs_without_enforcing():
    img, lab = asm_image(PROG)
    bm = bitmaps_for(len(img.text), code=[(0, len(img.text))])
    p = SimProcess(img, bm, "bgdx", mode="record")
    assert p.data_fetch(TEXT_BASE, 3) == img.text[:3]
    assert p.run(lab["f"]).status == "exited"
    assert p.read_set == {TEXT_BASE, TEXT_BASE + 1, TEXT_BASE + 2}
    assert TEXT_BASE in p.exec_set


# ----------------------------------------------------------------- chains

GADGETS = """
popa: POP r0
      RET
popb: POP r1
      RET
add:  ADD r0, r1
      RET
mov:  MOV r2, r0
      RET
sys:  SYS r2
      RET
"""


def chain_for(lab, x=30, y=12):
    return [("gadget", lab["popa"]), ("word", x), ("gadget", lab["popb"]), ("word", y),
            ("gadget", lab["add"]), ("gadget", lab["mov"]), ("gadget", lab["sys"])]


def test_valid_five_gadget_chain_succeeds_without_protection():
    img, lab = asm_image(GADGETS)
    out = SimProcess(img, None, "none").invoke_chain(chain_for(lab), [42])
    assert out.success and out.syscalls == [42]


def test_empty_chain_is_not_a_success():
    img, _ = asm_image(GADGETS)
    assert not SimProcess(img, None, "none").invoke_chain([], []).success


def test_chain_after_reading_first_gadget_crashes_under_dcr():
    img, lab = asm_image(GADGETS)
    p = SimProcess(img, None, "dcr-only")
    p.data_fetch(lab["popa"], 2)
    out = p.invoke_chain(chain_for(lab), [42])
    assert not out.success and out.status == "crashed" and out.reason == "garbled-execute"


def test_call_item_passes_arguments():
    img, lab = asm_image("f: ADD r0, r1\n SYS r0\n RET")
    out = SimProcess(img, None, "none").invoke_chain([("call", lab["f"], {0: 40, 1: 2})], [42])
    assert out.success


def test_wrong_expectation_fails():
    img, lab = asm_image(GADGETS)
    out = SimProcess(img, None, "none").invoke_chain(chain_for(lab), [41])
    assert not out.success and out.status == "exited"


# ------------------------------------------------------------- properties

@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 300), st.integers(1, 8)), min_size=1, max_size=2500),
       st.integers(0, 2**32 - 1))
def test_data_view_immutable_and_garble_subset(fetches, seed):
    p, img, policy = _fuzz_proc(seed)
    before = bytes(p.data_view)
    n = len(img.text)
    for off, ln in fetches:
        p.data_fetch(TEXT_BASE + off % n, ln)
        if p.crashed:
            break
    assert bytes(p.data_view) == before == img.text
    for a in p.garbled_set:
        assert p.code_view[a - TEXT_BASE] == GARBLE


_FUZZ = {}


def _fuzz_proc(seed):
    if "img" not in _FUZZ:
        from dcrlab.program.generator import GeneratorSpec, generate
        _FUZZ["img"] = generate(GeneratorSpec(block_count=40, seed=3))
    img = _FUZZ["img"]
    rng = np.random.default_rng(seed)
    n = len(img.text)
    code = rng.random(n) < 0.3
    data = ~code & (rng.random(n) < 0.3)
    from dcrlab.bitmaps import PermissionBitmaps
    policy = ("dcr-only", "bgdx", "xom-only", "none")[seed % 4]
    return SimProcess(img, PermissionBitmaps(code, data), policy), img, policy


def test_data_view_immutable_under_1e5_fetches():
    rng = np.random.default_rng(0)
    total = 0
    while total < 100_000:
        p, img, _ = _fuzz_proc(int(rng.integers(0, 2**32)))
        before = bytes(p.data_view)
        n = len(img.text)
        offs = rng.integers(0, n, 5000)
        lens = rng.integers(1, 9, 5000)
        for o, ln in zip(offs.tolist(), lens.tolist()):
            total += 1
            p.data_fetch(TEXT_BASE + o, ln)
            if p.crashed:
                break
        assert bytes(p.data_view) == before
        g = np.frombuffer(bytes(p.garbled_mask), dtype=np.uint8).astype(bool)
        assert (np.frombuffer(bytes(p.code_view), dtype=np.uint8)[g] == GARBLE).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_enforce_mode_never_runs_bytes_it_destroyed(seed):
    from dcrlab.program.generator import GeneratorSpec, generate
    img = _FUZZ.setdefault("img", generate(GeneratorSpec(block_count=40, seed=3)))
    rng = np.random.default_rng(seed)
    p = SimProcess(img, None, "dcr-only")
    for _ in range(rng.integers(0, 20)):
        p.data_fetch(TEXT_BASE + int(rng.integers(0, len(img.text) - 4)), int(rng.integers(1, 5)))
    f = img.functions[int(rng.integers(0, len(img.functions)))]
    p.run(img.entry_address(f.id), [int(x) for x in rng.integers(0, 50, f.param_count)], fuel=20_000)
    if not p.crashed:
        dcr_read = p.read_set
        assert not (p.exec_set & dcr_read & p.garbled_set)


def test_policy_none_matches_reference_interpreter(mid_image):
    img = mid_image
    rng = np.random.default_rng(5)
    fids = rng.choice(len(img.functions), 60, replace=False)
    checked = 0
    for f in fids.tolist():
        fn = img.functions[f]
        args = [int(x) for x in rng.integers(0, 2**32, fn.param_count)]
        snap = SimProcess(img, None, "none").run(img.entry_address(f), args, fuel=200_000)
        o = Oracle(img)
        status, regs, sys = o.run(img.entry_address(f), args, fuel=200_000)
        assert snap.status == status
        if status == "exited":
            assert snap.regs == regs and snap.syscalls == sys and snap.data == o.data_bytes()
            checked += 1
    assert checked > 40


def test_policy_none_matches_reference_on_jump_tables():
    img, lab = asm_image(JT)
    snap = SimProcess(img, None, "none").run(lab["f"])
    assert Oracle(img).run(lab["f"], [])[2] == snap.syscalls == [9]


def test_load_accepts_randomized_and_plain(small_image):
    from dcrlab.randomizer import RandomizationSpec, randomize
    r = randomize(small_image, None, RandomizationSpec("tier1", seed=1))
    assert load(r, "dcr-only").text_base == r.image.text_base
    assert load(small_image, "none").data_view == small_image.text


def test_observable_state_masks_pointer_tables(small_image):
    img = small_image
    f = img.entry_points[0]
    snap = SimProcess(img, None, "none").run(img.entry_address(f), [1, 2, 3, 4][:img.functions[f].param_count])
    st_ = enforcer.observable_state(snap, img)
    for t in img.pointer_tables:
        assert st_[3][t.offset:t.offset + 4 * len(t.entries)] == bytes(4 * len(t.entries))


def test_bad_policy_and_args():
    img, lab = asm_image(PROG)
    with pytest.raises(ValueError):
        SimProcess(img, None, "nope")
    with pytest.raises(ValueError):
        SimProcess(img, None, "none").run(lab["f"], {7: 1})
    with pytest.raises(ValueError):
        SimProcess(img, None, "none").run(lab["f"], [1, 2, 3, 4, 5])
