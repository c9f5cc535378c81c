"""Reference interpreter without any protection logic.

Written separately from the simulated process: flat memory, plain Python
integer arithmetic, and decoding straight from the text bytes.
"""

from dcrlab import isa
from dcrlab.program.image import STACK_SIZE, STACK_TOP

M = 0xFFFFFFFF
SENTINEL = 0xFFFFFFF0


def _s(v):
    return v - (1 << 32) if v & 0x80000000 else v


def _arith(op, a, b):
    table = {
        "MOV": lambda: b,
        "ADD": lambda: a + b, "SUB": lambda: a - b, "XOR": lambda: a ^ b,
        "AND": lambda: a & b, "OR": lambda: a | b, "MUL": lambda: a * b,
        "SHL": lambda: a << (b % 32), "SHR": lambda: a >> (b % 32),
        "SAR": lambda: _s(a) >> (b % 32),
        "ROL": lambda: (a << (b % 32)) | (a >> ((32 - b % 32) % 32)) if b % 32 else a,
        "SLT": lambda: int(_s(a) < _s(b)),
    }
    return table[op]() & M


class Oracle:
    def __init__(self, img):
        self.mem = {}
        for i, b in enumerate(img.text):
            self.mem[img.text_base + i] = b
        for i, b in enumerate(img.data):
            self.mem[img.data_base + i] = b
        for a in range(STACK_TOP - STACK_SIZE, STACK_TOP):
            self.mem[a] = 0
        self.text = (img.text_base, img.text_base + len(img.text))
        self.img = img
        self.r = [0] * 8
        self.sys = []

    def rd(self, a):
        if any(a + k not in self.mem for k in range(4)):
            raise RuntimeError("unmapped")
        return sum(self.mem[a + k] << (8 * k) for k in range(4))

    def wr(self, a, v):
        if self.text[0] <= a + 3 and a < self.text[1]:
            raise RuntimeError("write-protect")
        if any(a + k not in self.mem for k in range(4)):
            raise RuntimeError("unmapped")
        for k in range(4):
            self.mem[a + k] = (v >> (8 * k)) & 0xFF

    def push(self, v):
        self.r[7] = (self.r[7] - 4) & M
        self.wr(self.r[7], v)

    def pop(self):
        v = self.rd(self.r[7])
        self.r[7] = (self.r[7] + 4) & M
        return v

    def run(self, entry, args, fuel=1_000_000):
        for i, a in enumerate(args):
            self.r[i] = a & M
        self.r[7] = STACK_TOP - 16
        self.push(SENTINEL)
        pc, steps = entry, 0
        try:
            while pc != SENTINEL and steps < fuel:
                pc = self.step(pc)
                steps += 1
        except RuntimeError:
            return "crashed", self.r, self.sys
        return ("exited" if pc == SENTINEL else "fuel-exhausted"), self.r, self.sys

    def step(self, pc):
        lo, hi = self.text
        if not lo <= pc < hi:
            raise RuntimeError("unmapped-execute")
        ins = isa.try_decode(self.img.text, pc - lo)
        if ins is None:
            raise RuntimeError("decode")
        r, m, g, nxt = self.r, ins.mnemonic, ins.regs, pc + ins.length
        if m == "XCHG":
            r[g[0]], r[g[1]] = r[g[1]], r[g[0]]
        elif m in isa.RR_MNEMONICS:
            r[g[0]] = _arith(m, r[g[0]], r[g[1]])
        elif m in ("MOVI", "MOVIS"):
            r[g[0]] = ins.imm & M
        elif m in ("ADDI", "SUBI", "XORI", "ANDI", "ORI", "MULI", "SHLI", "SHRI"):
            r[g[0]] = _arith(m[:-1], r[g[0]], ins.imm & M)
        elif m == "LOAD":
            r[g[0]] = self.rd((r[g[1]] + ins.imm) & M)
        elif m == "STORE":
            self.wr((r[g[0]] + ins.imm) & M, r[g[1]])
        elif m == "LEA":
            r[g[0]] = (r[g[1]] + ins.imm) & M
        elif m == "LEAPC":
            r[g[0]] = (nxt + ins.imm) & M
        elif m == "LOADPC":
            r[g[0]] = self.rd((nxt + ins.imm) & M)
        elif m in ("JMP", "JMP8"):
            return nxt + ins.imm
        elif m in isa.COND_MNEMONICS:
            v = r[g[0]]
            take = {"JZ": v == 0, "JNZ": v != 0, "JLTZ": v >= 1 << 31, "JGEZ": v < 1 << 31}[m.rstrip("8")]
            return nxt + ins.imm if take else nxt
        elif m == "CALL":
            self.push(nxt)
            return nxt + ins.imm
        elif m == "CALLR":
            t = r[g[0]]
            self.push(nxt)
            return t
        elif m == "JMPR":
            return r[g[0]]
        elif m == "RET":
            return self.pop()
        elif m == "JTAB":
            return self.rd(nxt + ins.imm + 4 * (r[g[0]] % ins.count))
        elif m == "SYS":
            self.sys.append(r[g[0]])
        elif m == "NOT":
            r[g[0]] = ~r[g[0]] & M
        elif m == "NEG":
            r[g[0]] = -r[g[0]] & M
        elif m == "PUSH":
            self.push(r[g[0]])
        elif m == "PUSHI":
            self.push(ins.imm & M)
        elif m == "POP":
            r[g[0]] = self.pop()
        elif m == "NOP":
            pass
        else:
            raise AssertionError(m)
        return nxt

    def data_bytes(self):
        b = self.img.data_base
        return bytes(self.mem[b + i] for i in range(len(self.img.data)))
