"""Textual hetIR: parser with spanned diagnostics, and the canonical printer.

Grammar (``.hir`` files, UTF-8)::

    module  := [".version" INT [";"]] kernel+
    kernel  := ".func" NAME "(" [param ("," param)*] ")" "{" decl* item* "}"
    param   := [".param"] type REG
    type    := "." TYPENAME ["<" "1" ">"]          -- <1> tags a global pointer
    decl    := ".reg" type REG ("," REG)* ";" | ".shared" INT ";" | ".local" INT ";"
    item    := "@PRED" "(" REG ")" "{" item* "}" ["@ELSE" "{" item* "}"]
             | "@LOOP" ["(" INT ")"] "{" item* "}" "@BREAK" "(" REG ")" ";"
             | MNEMONIC [operand ("," operand)*] ";"
    operand := REG | NUMBER | "[" (REG | INT) [("+" INT) | NEGINT] "]"

Comments run from ``//`` to end of line.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass
from typing import Optional

from .errors import ValidationError
from .ir import (
    Addr,
    Imm,
    Instruction,
    Kernel,
    KernelMeta,
    LoopBlock,
    MemSpace,
    Module,
    Opcode,
    PredBlock,
    Reg,
    Region,
    SemType,
    check_instruction,
    default_type,
    signature_of,
    validate,
)

MAX_DIAGNOSTICS = 32


class Severity(enum.Enum):
    ERROR = "error"
    WARNING = "warning"


@dataclass(frozen=True)
class SourceSpan:
    byte_start: int
    byte_end: int
    line: int
    column: int


@dataclass(frozen=True)
class ParseDiagnostic:
    span: SourceSpan
    severity: Severity
    message: str

    def __str__(self) -> str:
        return f"{self.span.line}:{self.span.column}: {self.severity.value}: {self.message}"


class AsmError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# lexer

_TOKEN_RE = re.compile(
    rb"""
    (?P<ws>[ \t\r\n]+|//[^\n]*)
  | (?P<reg>%[A-Za-z]*[0-9]+)
  | (?P<num>[+-]?(?:0[xX][0-9a-fA-F]*(?:\.[0-9a-fA-F]*)?(?:[pP][+-]?[0-9]+)?
                  |[0-9]+(?:\.[0-9]*)?(?:[eE][+-]?[0-9]+)?
                  |\.[0-9]+(?:[eE][+-]?[0-9]+)?
                  |inf\b|nan\b))
  | (?P<ident>[.@]?[A-Za-z_][A-Za-z0-9_.$]*)
  | (?P<punct>[(){}\[\],;+<>])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    start: int
    end: int


def _lex(data: bytes, diags: list) -> list:
    toks = []
    pos = 0
    n = len(data)
    while pos < n:
        m = _TOKEN_RE.match(data, pos)
        if m is None or m.end() == pos:
            end = pos + 1
            while end < n and (data[end] & 0xC0) == 0x80:
                end += 1
            diags.append((pos, end, f"unexpected character {data[pos:end].decode('utf-8', 'replace')!r}"))
            pos = end
            continue
        kind = m.lastgroup
        if kind != "ws":
            toks.append(Token(kind, m.group().decode("ascii", "replace"), pos, m.end()))
        pos = m.end()
    toks.append(Token("eof", "", n, n))
    return toks


# ---------------------------------------------------------------------------
# parser

_FLOAT_ALIASES = {"FADD": "ADD", "FSUB": "SUB", "FMUL": "MUL", "FDIV": "DIV", "FFMA": "FMA", "FMIN": "MIN", "FMAX": "MAX"}
_SPACES = {"GLOBAL": MemSpace.GLOBAL, "SHARED": MemSpace.SHARED, "LOCAL": MemSpace.LOCAL}
_TYPE_NAMES = {t.value: t for t in SemType}


class _Bail(Exception):
    """Abandon the current statement; the diagnostic is already recorded."""


class _Parser:
    def __init__(self, data: bytes, filename: str):
        self.data = data
        self.filename = filename
        self.raw_diags: list = []
        self.toks = _lex(data, self.raw_diags)
        self.i = 0
        self.kernel_spans: dict = {}
        self.line_starts = [0] + [m.end() for m in re.finditer(rb"\n", data)]

    # -- helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def advance(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "eof":
            self.i += 1
        return t

    def error(self, tok: Token, msg: str):
        self.raw_diags.append((tok.start, max(tok.end, tok.start), msg))
        raise _Bail()

    def expect(self, text: str) -> Token:
        if self.tok.text != text:
            self.error(self.tok, f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def accept(self, text: str) -> bool:
        if self.tok.text == text and self.tok.kind != "eof":
            self.advance()
            return True
        return False

    def expect_int(self) -> int:
        t = self.tok
        if t.kind != "num":
            self.error(t, f"expected integer, found {t.text or 'end of input'!r}")
        v = _parse_int(t.text)
        if v is None:
            self.error(t, f"expected integer, found {t.text!r}")
        self.advance()
        return v

    def line_of(self, pos: int) -> tuple:
        lo, hi = 0, len(self.line_starts) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.line_starts[mid] <= pos:
                lo = mid
            else:
                hi = mid - 1
        return lo + 1, pos - self.line_starts[lo] + 1

    def span(self, start: int, end: int) -> SourceSpan:
        line, col = self.line_of(start)
        return SourceSpan(start, end, line, col)

    def sync(self, stops=(";", "}")):
        """Skip to just past the next statement terminator."""
        depth = 0
        while self.tok.kind != "eof":
            t = self.advance()
            if t.text == "{":
                depth += 1
            elif t.text == "}":
                if depth == 0:
                    self.i -= 1
                    return
                depth -= 1
            elif t.text == ";" and depth == 0:
                return

    # -- grammar
    def parse_module(self) -> Optional[Module]:
        version = 1
        kernels = []
        if self.tok.text == ".version":
            self.advance()
            try:
                version = self.expect_int()
                self.accept(";")
            except _Bail:
                self.sync()
        if self.tok.text != ".func":
            self.raw_diags.append((self.tok.start, self.tok.end, "expected .func"))
            return None
        while self.tok.kind != "eof":
            if self.tok.text != ".func":
                t = self.tok
                self.raw_diags.append((t.start, t.end, f"expected .func, found {t.text!r}"))
                while self.tok.kind != "eof" and self.tok.text != ".func":
                    self.advance()
                continue
            k = self.parse_kernel()
            if k is not None:
                kernels.append(k)
        return Module(tuple(kernels), version)

    def parse_type(self) -> tuple:
        t = self.tok
        if t.kind != "ident" or not t.text.startswith(".") or t.text[1:].lower() not in _TYPE_NAMES:
            self.error(t, f"expected a type, found {t.text or 'end of input'!r}")
        self.advance()
        st = _TYPE_NAMES[t.text[1:].lower()]
        ptr = False
        if self.accept("<"):
            tag = self.expect_int()
            if tag != 1:
                self.error(self.toks[self.i - 1], "only the global address-space tag <1> is supported")
            self.expect(">")
            ptr = True
        return st, ptr

    def declare(self, tok: Token, st: SemType, ptr: bool) -> Reg:
        rid = int(re.sub(r"^%[A-Za-z]*", "", tok.text))
        if rid in self.regs:
            self.error(tok, f"duplicate register id {rid}")
        r = Reg(rid, st, ptr)
        self.regs[rid] = r
        return r

    def parse_kernel(self) -> Optional[Kernel]:
        start = self.tok.start
        self.advance()  # .func
        self.regs: dict = {}
        self.lines: dict = {}
        self.spans: dict = {}
        params, decls = [], []
        shared = local = 0
        try:
            name_tok = self.tok
            if name_tok.kind != "ident" or name_tok.text.startswith((".", "@")):
                self.error(name_tok, "expected kernel name")
            self.advance()
            self.expect("(")
            if not self.accept(")"):
                while True:
                    self.accept(".param")
                    st, ptr = self.parse_type()
                    if self.tok.kind != "reg":
                        self.error(self.tok, "expected parameter register")
                    params.append(self.declare(self.advance(), st, ptr))
                    if self.accept(")"):
                        break
                    self.expect(",")
            self.expect("{")
        except _Bail:
            while self.tok.kind != "eof" and self.tok.text != ".func":
                self.advance()
            return None
        while self.tok.text in (".reg", ".shared", ".local"):
            try:
                d = self.advance().text
                if d == ".reg":
                    st, ptr = self.parse_type()
                    while True:
                        if self.tok.kind != "reg":
                            self.error(self.tok, "expected register name")
                        decls.append(self.declare(self.advance(), st, ptr))
                        if not self.accept(","):
                            break
                else:
                    size = self.expect_int()
                    if size < 0:
                        self.error(self.toks[self.i - 1], "negative size")
                    if d == ".shared":
                        shared = size
                    else:
                        local = size
                self.expect(";")
            except _Bail:
                self.sync()
        items = self.parse_items(())
        if not self.accept("}"):
            self.raw_diags.append((self.tok.start, self.tok.end, "expected '}' closing kernel"))
        k = Kernel(
            name_tok.text,
            tuple(params),
            tuple(decls),
            Region(tuple(items)),
            shared,
            local,
            KernelMeta(source_lines=dict(self.lines)),
        )
        self.kernel_spans[k.name] = (self.spans, self.span(start, self.toks[self.i - 1].end))
        return k

    def parse_items(self, prefix: tuple) -> list:
        items = []
        while self.tok.kind != "eof" and self.tok.text not in ("}", ".func"):
            path = prefix + (len(items),)
            start = self.tok
            try:
                item = self.parse_item(path)
            except _Bail:
                self.sync()
                continue
            if item is not None:
                self.lines[path] = (self.filename, self.line_of(start.start)[0])
                self.spans[path] = self.span(start.start, self.toks[self.i - 1].end)
                items.append(item)
        return items

    def reg_ref(self) -> Reg:
        t = self.tok
        if t.kind != "reg":
            self.error(t, f"expected register, found {t.text or 'end of input'!r}")
        self.advance()
        rid = int(re.sub(r"^%[A-Za-z]*", "", t.text))
        r = self.regs.get(rid)
        if r is None:
            self.error(t, f"undeclared register {t.text}")
        return r

    def block(self, path: tuple) -> Region:
        self.expect("{")
        items = self.parse_items(path)
        self.expect("}")
        return Region(tuple(items))

    def parse_item(self, path: tuple):
        t = self.tok
        if t.text == "@PRED":
            self.advance()
            self.expect("(")
            pred = self.reg_ref()
            self.expect(")")
            then = self.block(path + (0,))
            orelse = None
            if self.accept("@ELSE"):
                orelse = self.block(path + (1,))
            return PredBlock(pred, then, orelse)
        if t.text == "@LOOP":
            self.advance()
            trip = None
            if self.accept("("):
                trip = self.expect_int()
                self.expect(")")
            body = self.block(path + (0,))
            self.expect("@BREAK")
            self.expect("(")
            brk = self.reg_ref()
            self.expect(")")
            self.expect(";")
            return LoopBlock(body, brk, trip)
        if t.kind != "ident" or t.text.startswith((".", "@")):
            self.error(t, f"expected instruction, found {t.text or 'end of input'!r}")
        return self.parse_instruction()

    def parse_instruction(self) -> Instruction:
        mtok = self.advance()
        opcode, space, types = _decode_mnemonic(mtok.text)
        if opcode is None:
            self.error(mtok, f"unknown mnemonic {mtok.text!r}")
        sig = signature_of(opcode)
        if sig.typed:
            need = 2 if opcode is Opcode.CVT else 1
            if len(types) != need:
                self.error(mtok, f"{opcode.value} needs {need} type suffix{'es' if need > 1 else ''}")
            itype = types[0]
            src_type = types[1] if opcode is Opcode.CVT else None
            if itype not in sig.types:
                self.error(mtok, f"{opcode.value} does not accept type {itype.value}")
        else:
            if types:
                self.error(mtok, f"{opcode.value} takes no type suffix")
            itype, src_type = default_type(opcode), None
        if opcode in (Opcode.LD, Opcode.ST) and space is None:
            self.error(mtok, f"{opcode.value} needs a memory space")
        if opcode in (Opcode.ATOM_ADD, Opcode.ATOM_CAS):
            space = MemSpace.GLOBAL

        raw = []
        if self.tok.text != ";":
            while True:
                raw.append(self.parse_operand())
                if not self.accept(","):
                    break
        self.expect(";")

        ops, res = signature_of(opcode, itype).resolve(itype)
        if opcode is Opcode.CVT:
            ops = (src_type,)
        want = len(ops) + (res is not None)
        if len(raw) != want:
            self.error(
                mtok,
                f"{mtok.text} signature arity mismatch: expects {want} operands "
                f"({'1 result + ' if res is not None else ''}{len(ops)} sources), got {len(raw)}",
            )
        dst = None
        if res is not None:
            tok, kind, val = raw[0]
            if kind != "reg":
                self.error(tok, "destination must be a register")
            dst = val
            raw = raw[1:]
        srcs = []
        for want_t, (tok, kind, val) in zip(ops, raw):
            if want_t == "ADDR":
                if kind != "addr":
                    self.error(tok, "expected memory operand [..]")
                base, off = val
                if isinstance(base, str):
                    v = _parse_int(base)
                    if v is None:
                        self.error(tok, "address immediate must be an integer")
                    base = Imm(v)
                srcs.append(Addr(base, off))
            elif kind == "reg":
                srcs.append(val)
            elif kind == "addr":
                self.error(tok, "unexpected memory operand")
            else:
                t = SemType.U32 if want_t in ("DIM", "RID") else want_t
                v = _convert_imm(val, t)
                if v is None:
                    self.error(tok, f"bad {t.value} immediate {val!r}")
                srcs.append(Imm(v))
        ins = Instruction(opcode, itype, dst, tuple(srcs), space, src_type)
        msgs = check_instruction(ins)
        if msgs:
            self.error(mtok, msgs[0])
        return ins

    def parse_operand(self) -> tuple:
        t = self.tok
        if t.kind == "reg":
            return t, "reg", self.reg_ref()
        if t.kind == "num" or t.text in ("true", "false"):
            self.advance()
            return t, "imm", t.text
        if t.text == "[":
            self.advance()
            bt = self.tok
            if bt.kind == "reg":
                base = self.reg_ref()
            elif bt.kind == "num":
                base = self.advance().text
            else:
                self.error(bt, "expected address base")
            off = 0
            if self.accept("+"):
                off = self.expect_int()
            elif self.tok.kind == "num" and self.tok.text.startswith(("-", "+")):
                off = self.expect_int()
            self.expect("]")
            return t, "addr", (base, off)
        self.error(t, f"expected operand, found {t.text or 'end of input'!r}")


def _decode_mnemonic(text: str):
    parts = text.split(".")
    base = parts[0].upper()
    rest = [p.upper() for p in parts[1:]]
    space = None
    if base in _FLOAT_ALIASES:
        base = _FLOAT_ALIASES[base]
    if base == "RET":
        base = "RETURN"
    for pre in ("LD_", "ST_"):
        if base.startswith(pre) and base[3:] in _SPACES:
            space = _SPACES[base[3:]]
            base = base[:2]
    if base in ("LD", "ST", "ATOM_ADD", "ATOM_CAS") and rest and rest[0] in _SPACES:
        space = _SPACES[rest.pop(0)]
    if base == "BAR" and rest and rest[0] in ("SHARED", "SYNC", "GLOBAL"):
        base = "BAR_GLOBAL" if rest.pop(0) == "GLOBAL" else "BAR_SHARED"
    if base == "SETP":
        if not rest:
            return None, None, []
        base = "SETP." + rest.pop(0)
    try:
        op = Opcode(base)
    except ValueError:
        return None, None, []
    types = []
    for r in rest:
        st = _TYPE_NAMES.get(r.lower())
        if st is None:
            return None, None, []
        types.append(st)
    return op, space, types


def _parse_int(text: str) -> Optional[int]:
    try:
        if re.fullmatch(r"[+-]?0[xX][0-9a-fA-F]+", text):
            return int(text, 16)
        if re.fullmatch(r"[+-]?[0-9]+", text):
            return int(text, 10)
    except ValueError:
        return None
    return None


def _convert_imm(text: str, t: SemType):
    if t is SemType.PRED:
        if text in ("true", "false"):
            return int(text == "true")
        v = _parse_int(text)
        return v if v in (0, 1) else None
    if t.is_int:
        v = _parse_int(text)
        if v is None:
            return None
        if t is SemType.S32:
            return v if -(1 << 31) <= v < 1 << 31 else None
        limit = 1 << t.bits
        return v if 0 <= v < limit else None
    try:
        if re.fullmatch(r"[+-]?0[xX][0-9a-fA-F]*(\.[0-9a-fA-F]*)?[pP][+-]?[0-9]+", text) or re.fullmatch(
            r"[+-]?0[xX][0-9a-fA-F]*\.[0-9a-fA-F]*", text
        ):
            v = float.fromhex(text)
        elif _parse_int(text) is not None:
            v = float(_parse_int(text))
        else:
            v = float(text)
    except (ValueError, OverflowError):
        return None
    if t is SemType.F32 and v == v:
        try:
            v = struct.unpack("<f", struct.pack("<f", v))[0]
        except OverflowError:
            return None
    return v


def parse_with_diagnostics(text, filename: str = "<input>") -> tuple:
    """Parse ``text`` (bytes or str). Returns ``(module or None, diagnostics)``."""
    if isinstance(text, str):
        data = text.encode("utf-8")
    else:
        data = bytes(text)
    try:
        data.decode("utf-8")
    except UnicodeDecodeError as e:
        span = SourceSpan(e.start, e.end, 1, 1)
        return None, [ParseDiagnostic(span, Severity.ERROR, "input is not valid UTF-8")]
    p = _Parser(data, filename)
    module = p.parse_module()
    diags = [ParseDiagnostic(p.span(s, e), Severity.ERROR, m) for s, e, m in p.raw_diags]
    if not diags and module is not None:
        report = validate(module)
        for d in report.diagnostics:
            spans, kspan = p.kernel_spans.get(d.kernel, ({}, SourceSpan(0, 0, 1, 1)))
            span = spans.get(d.path, kspan)
            diags.append(ParseDiagnostic(span, Severity.ERROR, d.message))
    diags = diags[:MAX_DIAGNOSTICS]
    if any(d.severity is Severity.ERROR for d in diags):
        return None, diags
    return module, diags


def parse(text, filename: str = "<input>") -> Module:
    module, diags = parse_with_diagnostics(text, filename)
    if module is None:
        raise AsmError("; ".join(str(d) for d in diags[:3]), diags)
    return module


# ---------------------------------------------------------------------------
# printer

_TYPE_ORDER = list(SemType)


def format_imm(value, t: Optional[SemType]) -> str:
    if isinstance(value, float):
        if value != value:
            return "nan"
        if value in (float("inf"), float("-inf")):
            return "inf" if value > 0 else "-inf"
        return value.hex()
    return str(int(value))


def _fmt_type(t: SemType, ptr: bool) -> str:
    return f".{t.value}" + ("<1>" if ptr else "")


def mnemonic(ins: Instruction) -> str:
    op = ins.opcode
    if op in (Opcode.LD, Opcode.ST):
        return f"{op.value}_{ins.space.name}.{ins.type.name}"
    if op is Opcode.CVT:
        return f"CVT.{ins.type.name}.{ins.src_type.name}"
    if not signature_of(op).typed:
        return op.value
    return f"{op.value}.{ins.type.name}"


def format_operand(o, t: Optional[SemType]) -> str:
    if isinstance(o, Reg):
        return o.name
    if isinstance(o, Imm):
        return format_imm(o.value, t)
    base = o.base.name if isinstance(o.base, Reg) else str(o.base.value)
    if o.offset > 0:
        return f"[{base}+{o.offset}]"
    if o.offset < 0:
        return f"[{base}{o.offset}]"
    return f"[{base}]"


def format_instruction(ins: Instruction) -> str:
    ops, _ = signature_of(ins.opcode, ins.type).resolve(ins.type)
    if ins.opcode is Opcode.CVT:
        ops = (ins.src_type,)
    parts = []
    if ins.dst is not None:
        parts.append(ins.dst.name)
    for want, s in zip(ops, ins.srcs):
        parts.append(format_operand(s, want if isinstance(want, SemType) else SemType.U32))
    text = mnemonic(ins)
    if parts:
        text += " " + ", ".join(parts)
    return text + ";"


def _print_region(region: Region, indent: int, out: list):
    pad = "    " * indent
    for item in region.items:
        if isinstance(item, Instruction):
            out.append(pad + format_instruction(item))
        elif isinstance(item, PredBlock):
            out.append(f"{pad}@PRED({item.pred.name}) {{")
            _print_region(item.then, indent + 1, out)
            if item.orelse is not None:
                out.append(f"{pad}}} @ELSE {{")
                _print_region(item.orelse, indent + 1, out)
            out.append(pad + "}")
        else:
            head = "@LOOP" if item.trip is None else f"@LOOP({item.trip})"
            out.append(f"{pad}{head} {{")
            _print_region(item.body, indent + 1, out)
            out.append(f"{pad}}} @BREAK({item.brk.name});")


def print_kernel(k: Kernel) -> str:
    out = []
    params = ", ".join(f"{_fmt_type(r.type, r.ptr)} {r.name}" for r in k.params)
    out.append(f".func {k.name}({params})")
    out.append("{")
    groups: dict = {}
    for r in k.registers:
        groups.setdefault((r.type, r.ptr), []).append(r)
    for key in sorted(groups, key=lambda g: (_TYPE_ORDER.index(g[0]), g[1])):
        regs = ", ".join(r.name for r in groups[key])
        out.append(f"    .reg {_fmt_type(*key)} {regs};")
    if k.shared_mem_bytes:
        out.append(f"    .shared {k.shared_mem_bytes};")
    if k.local_mem_bytes:
        out.append(f"    .local {k.local_mem_bytes};")
    _print_region(k.body, 1, out)
    out.append("}")
    return "\n".join(out)


def print_module(module: Module) -> bytes:
    chunks = [f".version {module.version}"]
    for k in module.kernels:
        chunks.append(print_kernel(k))
    return ("\n\n".join(chunks) + "\n").encode("utf-8")
