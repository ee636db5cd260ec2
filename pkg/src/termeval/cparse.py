"""Parser and value semantics for the C subset found in desk-scale termination tasks.

The subset covers integer scalar declarations, assignments (plain, compound,
increment/decrement), ``if``/``else``, ``while``, ``for``, ``return``, and
calls to ``__VERIFIER_nondet_{int,char,short,long,uint,bool}``.  Anything
else (pointers, arrays, heap, goto, user function calls, ...) is classified
as :class:`UnsupportedConstruct` rather than raising: callers route such
programs to an external validator instead.

All arithmetic is two's-complement at the declared width with wraparound;
``/`` and ``%`` use C truncated semantics (sign follows the dividend).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

# ---------------------------------------------------------------------------
# Types and values


@dataclass(frozen=True)
class CType:
    name: str
    width: int
    signed: bool

    @property
    def min(self) -> int:
        return -(1 << (self.width - 1)) if self.signed else 0

    @property
    def max(self) -> int:
        return (1 << (self.width - 1)) - 1 if self.signed else (1 << self.width) - 1


CHAR = CType("char", 8, True)
UCHAR = CType("unsigned char", 8, False)
SHORT = CType("short", 16, True)
USHORT = CType("unsigned short", 16, False)
INT = CType("int", 32, True)
UINT = CType("unsigned int", 32, False)
LONG = CType("long", 64, True)
ULONG = CType("unsigned long", 64, False)
# the `typedef enum {false,true} bool;` pattern: an int-backed type
BOOL = CType("bool", 32, True)

NONDET_TYPES = {
    "__VERIFIER_nondet_int": INT,
    "__VERIFIER_nondet_char": CHAR,
    "__VERIFIER_nondet_short": SHORT,
    "__VERIFIER_nondet_long": LONG,
    "__VERIFIER_nondet_uint": UINT,
    "__VERIFIER_nondet_bool": BOOL,
}


class EvalUndefined(Exception):
    """Raised when evaluation hits C undefined behaviour (division by zero,
    out-of-range shift). Callers decide how to treat the affected run."""


def wrap(value: int, ctype: CType) -> int:
    """Reduce ``value`` into ``ctype``'s two's-complement range."""
    m = value & ((1 << ctype.width) - 1)
    if ctype.signed and m >= 1 << (ctype.width - 1):
        m -= 1 << ctype.width
    return m


def promote(t: CType) -> CType:
    """C integer promotion: anything narrower than int becomes int."""
    return INT if t.width < 32 else t


def usual_arithmetic_type(a: CType, b: CType) -> CType:
    """Usual arithmetic conversions, restricted to 32/64-bit integer ranks."""
    a, b = promote(a), promote(b)
    if a.width == b.width:
        if a.signed == b.signed:
            return a
        return UINT if a.width == 32 else ULONG
    wide, narrow = (a, b) if a.width > b.width else (b, a)
    if wide.signed and not narrow.signed:
        # long (64) can represent every unsigned int (32) value
        return wide
    return wide


def c_div(a: int, b: int) -> int:
    """C truncated division (rounds toward zero)."""
    if b == 0:
        raise EvalUndefined("division by zero")
    q = abs(a) // abs(b)
    return q if (a < 0) == (b < 0) else -q


def c_rem(a: int, b: int) -> int:
    """C remainder: sign follows the dividend."""
    return a - c_div(a, b) * b


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class IntLit:
    value: int
    ctype: CType = INT


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # -, ~, !
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


Expr = IntLit | Var | Unary | Binary


@dataclass
class Decl:
    name: str
    ctype: CType
    init: Expr | None
    line: int


@dataclass
class Assign:
    name: str
    expr: Expr
    line: int


@dataclass
class NondetAssign:
    name: str
    ctype: CType
    line: int


@dataclass
class If:
    cond: Expr
    then_body: list["Stmt"]
    else_body: list["Stmt"]
    line: int


@dataclass
class While:
    cond: Expr
    body: list["Stmt"]
    line: int


@dataclass
class For:
    init: "Stmt | None"
    cond: Expr | None
    step: "Stmt | None"
    body: list["Stmt"]
    line: int


@dataclass
class Return:
    expr: Expr | None
    line: int


@dataclass
class Block:
    stmts: list["Stmt"]
    line: int


Stmt = Decl | Assign | NondetAssign | If | While | For | Return | Block


@dataclass
class FunctionDef:
    name: str
    ret_type: CType | None  # None for void
    params: list[tuple[str, CType]]
    body: list[Stmt]
    line: int


@dataclass
class NondetSite:
    name: str
    ctype: CType
    line: int


@dataclass
class Program:
    functions: dict[str, FunctionDef]
    entry: str
    nondet_vars: list[NondetSite]
    globals: list[Decl] = field(default_factory=list)
    line_count: int = 0

    @property
    def main(self) -> FunctionDef:
        return self.functions[self.entry]


@dataclass
class UnsupportedConstruct:
    line: int
    construct: str

    def __str__(self) -> str:
        return f"unsupported construct at line {self.line}: {self.construct}"


class CParseError(Exception):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class _Unsupported(Exception):
    def __init__(self, line: int, construct: str):
        self.line = line
        self.construct = construct


# ---------------------------------------------------------------------------
# Line-number prefixes

_PREFIX_RE = re.compile(r"^(\d+): ?")


def strip_line_prefixes(source: str) -> str:
    """Remove ``k: `` prefixes when every nonempty line carries one."""
    lines = source.splitlines(keepends=True)
    bodies = []
    for raw in lines:
        content = raw.rstrip("\n")
        m = _PREFIX_RE.match(content)
        if m is None:
            if content.strip():
                return source  # not a uniformly numbered source
            bodies.append(raw)
        else:
            bodies.append(content[m.end():] + raw[len(content):])
    if not any(_PREFIX_RE.match(ln) for ln in lines):
        return source
    return "".join(bodies)


# ---------------------------------------------------------------------------
# Lexer

_KEYWORDS = {
    "int", "char", "short", "long", "signed", "unsigned", "void", "bool",
    "if", "else", "while", "for", "return", "typedef", "enum", "extern",
    "const", "true", "false",
    # recognized so they classify as unsupported instead of misparsing
    "do", "break", "continue", "goto", "switch", "case", "default",
    "struct", "union", "float", "double", "static", "sizeof",
}

_PUNCT = [
    "<<=", ">>=", "...",
    "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "++", "--",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "->",
    "+", "-", "*", "/", "%", "<", ">", "=", "!", "~", "&", "|", "^",
    "(", ")", "{", "}", ";", ",", "[", "]", "?", ":", ".",
]


@dataclass(frozen=True)
class Token:
    kind: str  # 'ident', 'num', 'punct', 'keyword', 'eof'
    text: str
    line: int
    value: int | None = None
    ctype: CType | None = None


def _literal_type(value: int, is_decimal: bool, suffix: str) -> CType:
    suffix = suffix.lower()
    unsigned = "u" in suffix
    wants_long = "l" in suffix
    if unsigned:
        candidates = [ULONG] if wants_long else [UINT, ULONG]
    elif is_decimal:
        # decimal constants without 'u' stay signed
        candidates = [LONG] if wants_long else [INT, LONG]
    else:
        candidates = [LONG, ULONG] if wants_long else [INT, UINT, LONG, ULONG]
    for t in candidates:
        if t.min <= value <= t.max:
            return t
    return candidates[-1]


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    i, n, line = 0, len(source), 1
    while i < n:
        ch = source[i]
        if ch == "\n":
            line += 1
            i += 1
            continue
        if ch in " \t\r\f\v":
            i += 1
            continue
        if source.startswith("//", i):
            j = source.find("\n", i)
            i = n if j < 0 else j
            continue
        if source.startswith("/*", i):
            j = source.find("*/", i + 2)
            if j < 0:
                raise CParseError("unterminated comment", line)
            line += source.count("\n", i, j)
            i = j + 2
            continue
        if ch == "#":  # preprocessor line (e.g. #include): skip the line
            j = source.find("\n", i)
            i = n if j < 0 else j
            continue
        if ch in "\"'":
            j = i + 1
            while j < n and source[j] != ch:
                j += 2 if source[j] == "\\" else 1
            if j >= n:
                raise CParseError("unterminated string", line)
            tokens.append(Token("string", source[i:j + 1], line))
            i = j + 1
            continue
        if ch.isascii() and ch.isdigit():
            m = re.match(r"0[xX][0-9a-fA-F]+|[0-9]+", source[i:])
            text = m.group(0)
            j = i + len(text)
            suffix = ""
            while j < n and source[j] in "uUlL":
                suffix += source[j]
                j += 1
            is_decimal = not text.lower().startswith("0x") and not (
                len(text) > 1 and text.startswith("0"))
            value = int(text, 0)
            tokens.append(Token("num", text + suffix, line, value=value,
                                ctype=_literal_type(value, is_decimal, suffix)))
            i = j
            continue
        if ch.isascii() and (ch.isalpha() or ch == "_"):
            m = re.match(r"[A-Za-z_][A-Za-z0-9_]*", source[i:])
            text = m.group(0)
            kind = "keyword" if text in _KEYWORDS else "ident"
            tokens.append(Token(kind, text, line))
            i += len(text)
            continue
        for p in _PUNCT:
            if source.startswith(p, i):
                tokens.append(Token("punct", p, line))
                i += len(p)
                break
        else:
            raise CParseError(f"unexpected character {ch!r}", line)
    tokens.append(Token("eof", "", line))
    return tokens


# ---------------------------------------------------------------------------
# Parser

_TYPE_KEYWORDS = {"int", "char", "short", "long", "signed", "unsigned", "bool", "void"}

_BINARY_PRECEDENCE = [
    ["||"],
    ["&&"],
    ["|"],
    ["^"],
    ["&"],
    ["==", "!="],
    ["<", "<=", ">", ">="],
    ["<<", ">>"],
    ["+", "-"],
    ["*", "/", "%"],
]

_COMPOUND_OPS = {"+=": "+", "-=": "-", "*=": "*", "/=": "/", "%=": "%",
                 "&=": "&", "|=": "|", "^=": "^", "<<=": "<<", ">>=": ">>"}


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0
        self.bool_typedef = False
        self.nondet_sites: list[NondetSite] = []
        self.extern_fns: set[str] = set()

    # -- token helpers

    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def accept(self, text: str) -> Token | None:
        if self.peek().text == text and self.peek().kind in ("punct", "keyword"):
            return self.next()
        return None

    def expect(self, text: str) -> Token:
        tok = self.next()
        if tok.text != text:
            raise CParseError(f"expected {text!r}, found {tok.text!r}", tok.line)
        return tok

    # -- types

    def _at_type(self) -> bool:
        tok = self.peek()
        if tok.kind == "keyword" and tok.text in _TYPE_KEYWORDS:
            return True
        return tok.kind == "keyword" and tok.text == "bool"

    def parse_type(self) -> CType | None:
        """Parse a type specifier; returns None for void."""
        words = []
        while self.peek().kind == "keyword" and self.peek().text in (
                _TYPE_KEYWORDS | {"const"}):
            w = self.next().text
            if w != "const":
                words.append(w)
        if not words:
            tok = self.peek()
            if tok.kind == "keyword" and tok.text in (
                    "float", "double", "struct", "union", "static"):
                raise _Unsupported(tok.line, f"type {tok.text}")
            raise CParseError("expected type", tok.line)
        if words == ["void"]:
            return None
        if words == ["bool"]:
            return BOOL
        unsigned = "unsigned" in words
        words = [w for w in words if w not in ("signed", "unsigned")]
        base = "int" if not words else words[-1]
        if words.count("long") >= 1:
            base = "long"
        table = {
            "char": (UCHAR if unsigned else CHAR),
            "short": (USHORT if unsigned else SHORT),
            "int": (UINT if unsigned else INT),
            "long": (ULONG if unsigned else LONG),
        }
        if base not in table:
            raise CParseError(f"unsupported type {' '.join(words)}", self.peek().line)
        return table[base]

    # -- expressions

    def parse_expression(self) -> Expr:
        return self._parse_binary(0)

    def _parse_binary(self, level: int) -> Expr:
        if level >= len(_BINARY_PRECEDENCE):
            return self._parse_unary()
        expr = self._parse_binary(level + 1)
        ops = _BINARY_PRECEDENCE[level]
        while self.peek().kind == "punct" and self.peek().text in ops:
            op = self.next().text
            right = self._parse_binary(level + 1)
            expr = Binary(op, expr, right)
        return expr

    def _parse_unary(self) -> Expr:
        tok = self.peek()
        if tok.kind == "punct" and tok.text in ("-", "~", "!"):
            self.next()
            return Unary(tok.text, self._parse_unary())
        if tok.kind == "punct" and tok.text == "+":
            self.next()
            return self._parse_unary()
        if tok.kind == "punct" and tok.text in ("++", "--", "*", "&"):
            raise _Unsupported(tok.line, f"unary {tok.text} in expression")
        return self._parse_postfix()

    def _parse_postfix(self) -> Expr:
        expr = self._parse_primary()
        tok = self.peek()
        if tok.kind == "punct" and tok.text in ("[", ".", "->", "++", "--"):
            raise _Unsupported(tok.line, f"postfix {tok.text}")
        return expr

    def _parse_primary(self) -> Expr:
        tok = self.next()
        if tok.kind == "num":
            return IntLit(tok.value, tok.ctype)
        if tok.kind == "keyword" and tok.text in ("true", "false"):
            return IntLit(1 if tok.text == "true" else 0, INT)
        if tok.kind == "ident":
            if self.peek().text == "(":
                raise _Unsupported(tok.line, f"call to {tok.text} in expression")
            return Var(tok.text)
        if tok.text == "(":
            if self._at_type():
                raise _Unsupported(tok.line, "cast expression")
            expr = self.parse_expression()
            self.expect(")")
            if self.peek().text == "?":
                raise _Unsupported(tok.line, "conditional operator")
            return expr
        if tok.kind == "string":
            raise _Unsupported(tok.line, "string literal")
        raise CParseError(f"unexpected token {tok.text!r}", tok.line)

    # -- statements

    def _nondet_call(self) -> tuple[CType, int] | None:
        """Match ``__VERIFIER_nondet_X()`` at the cursor; consume on match."""
        tok = self.peek()
        if tok.kind == "ident" and self.peek(1).text == "(" and self.peek(2).text == ")":
            if tok.text in NONDET_TYPES:
                self.next(), self.next(), self.next()
                return NONDET_TYPES[tok.text], tok.line
            if tok.text.startswith("__VERIFIER_nondet_"):
                raise _Unsupported(tok.line, f"nondet type {tok.text}")
        return None

    def parse_statement(self) -> list[Stmt]:
        tok = self.peek()
        if tok.text == "{":
            line = self.next().line
            stmts = self.parse_block_body()
            return [Block(stmts, line)]
        if tok.text == ";":
            self.next()
            return []
        if tok.kind == "keyword":
            if tok.text == "if":
                return [self._parse_if()]
            if tok.text == "while":
                return [self._parse_while()]
            if tok.text == "for":
                return [self._parse_for()]
            if tok.text == "return":
                self.next()
                expr = None
                if self.peek().text != ";":
                    expr = self.parse_expression()
                self.expect(";")
                return [Return(expr, tok.line)]
            if tok.text in _TYPE_KEYWORDS or tok.text == "bool":
                return self._parse_decl()
            raise _Unsupported(tok.line, tok.text)
        if tok.kind == "ident":
            stmt = self._parse_assignment()
            self.expect(";")
            return stmt
        raise CParseError(f"unexpected token {tok.text!r}", tok.line)

    def parse_block_body(self) -> list[Stmt]:
        stmts: list[Stmt] = []
        while self.peek().text != "}":
            if self.peek().kind == "eof":
                raise CParseError("unexpected end of input in block", self.peek().line)
            stmts.extend(self.parse_statement())
        self.expect("}")
        return stmts

    def _parse_body_or_stmt(self) -> list[Stmt]:
        if self.peek().text == "{":
            self.next()
            return self.parse_block_body()
        return self.parse_statement()

    def _parse_if(self) -> If:
        line = self.expect("if").line
        self.expect("(")
        cond = self.parse_expression()
        self.expect(")")
        then_body = self._parse_body_or_stmt()
        else_body: list[Stmt] = []
        if self.accept("else"):
            else_body = self._parse_body_or_stmt()
        return If(cond, then_body, else_body, line)

    def _parse_while(self) -> While:
        line = self.expect("while").line
        self.expect("(")
        cond = self.parse_expression()
        self.expect(")")
        if self.accept(";"):
            return While(cond, [], line)
        body = self._parse_body_or_stmt()
        return While(cond, body, line)

    def _parse_for(self) -> For:
        line = self.expect("for").line
        self.expect("(")
        init: Stmt | None = None
        if self.peek().text != ";":
            if self._at_type():
                decls = self._parse_decl(expect_semi=False)
                if len(decls) != 1:
                    raise _Unsupported(line, "multiple declarators in for-init")
                init = decls[0]
            else:
                stmts = self._parse_assignment()
                init = stmts[0] if len(stmts) == 1 else Block(stmts, line)
        self.expect(";")
        cond = None
        if self.peek().text != ";":
            cond = self.parse_expression()
        self.expect(";")
        step: Stmt | None = None
        if self.peek().text != ")":
            stmts = self._parse_assignment()
            step = stmts[0] if len(stmts) == 1 else Block(stmts, line)
        self.expect(")")
        if self.accept(";"):
            return For(init, cond, step, [], line)
        body = self._parse_body_or_stmt()
        return For(init, cond, step, body, line)

    def _parse_decl(self, expect_semi: bool = True) -> list[Stmt]:
        line = self.peek().line
        ctype = self.parse_type()
        if ctype is None:
            raise _Unsupported(line, "void variable")
        stmts: list[Stmt] = []
        while True:
            if self.peek().text == "*":
                raise _Unsupported(self.peek().line, "pointer declaration")
            name_tok = self.next()
            if name_tok.kind != "ident":
                raise CParseError(f"expected identifier, found {name_tok.text!r}",
                                  name_tok.line)
            if self.peek().text == "[":
                raise _Unsupported(self.peek().line, "array declaration")
            if self.accept("="):
                nd = self._nondet_call()
                if nd is not None:
                    stmts.append(Decl(name_tok.text, ctype, None, name_tok.line))
                    site = NondetSite(name_tok.text, nd[0], nd[1])
                    self.nondet_sites.append(site)
                    stmts.append(NondetAssign(name_tok.text, nd[0], nd[1]))
                else:
                    stmts.append(Decl(name_tok.text, ctype,
                                      self.parse_expression(), name_tok.line))
            else:
                stmts.append(Decl(name_tok.text, ctype, None, name_tok.line))
            if not self.accept(","):
                break
        if expect_semi:
            self.expect(";")
        return stmts

    def _parse_assignment(self) -> list[Stmt]:
        name_tok = self.next()
        line = name_tok.line
        name = name_tok.text
        tok = self.peek()
        if tok.text == "=":
            self.next()
            nd = self._nondet_call()
            if nd is not None:
                site = NondetSite(name, nd[0], nd[1])
                self.nondet_sites.append(site)
                return [NondetAssign(name, nd[0], line)]
            return [Assign(name, self.parse_expression(), line)]
        if tok.text in _COMPOUND_OPS:
            self.next()
            rhs = self.parse_expression()
            return [Assign(name, Binary(_COMPOUND_OPS[tok.text], Var(name), rhs), line)]
        if tok.text == "++":
            self.next()
            return [Assign(name, Binary("+", Var(name), IntLit(1)), line)]
        if tok.text == "--":
            self.next()
            return [Assign(name, Binary("-", Var(name), IntLit(1)), line)]
        if tok.text == "(":
            raise _Unsupported(line, f"call statement {name}(...)")
        raise _Unsupported(line, f"statement starting with {name!r}")

    # -- top level

    def parse_program(self, line_count: int) -> Program:
        functions: dict[str, FunctionDef] = {}
        globals_: list[Decl] = []
        while self.peek().kind != "eof":
            tok = self.peek()
            if tok.text == "typedef":
                self._parse_typedef()
                continue
            if tok.text == "extern":
                self._parse_extern()
                continue
            if self._at_type():
                self._parse_type_lead(functions, globals_)
                continue
            raise _Unsupported(tok.line, f"top-level {tok.text!r}")
        if "main" not in functions:
            raise CParseError("no main function", self.peek().line)
        return Program(functions, "main", self.nondet_sites, globals_, line_count)

    def _parse_typedef(self) -> None:
        line = self.expect("typedef").line
        if self.peek().text == "enum":
            # the `typedef enum {false,true} bool;` idiom
            self.next()
            self.expect("{")
            names = []
            while self.peek().text != "}":
                t = self.next()
                if t.kind not in ("ident", "keyword"):
                    raise CParseError("bad enum member", t.line)
                names.append(t.text)
                self.accept(",")
            self.expect("}")
            alias = self.next()
            self.expect(";")
            if alias.text == "bool" and names[:2] == ["false", "true"]:
                self.bool_typedef = True
                return
            raise _Unsupported(line, f"typedef enum {alias.text}")
        raise _Unsupported(line, "typedef")

    def _parse_extern(self) -> None:
        line = self.expect("extern").line
        self.parse_type()
        name = self.next()
        if name.kind != "ident":
            raise CParseError("expected identifier after extern type", name.line)
        if self.accept("("):
            depth = 1
            while depth:
                t = self.next()
                if t.kind == "eof":
                    raise CParseError("unterminated extern declaration", line)
                depth += {"(": 1, ")": -1}.get(t.text, 0)
            self.expect(";")
            self.extern_fns.add(name.text)
            return
        raise _Unsupported(line, "extern variable")

    def _parse_type_lead(self, functions: dict[str, FunctionDef],
                         globals_: list[Decl]) -> None:
        start = self.pos
        ctype = self.parse_type()
        name = self.peek()
        if name.kind != "ident":
            raise CParseError(f"expected identifier, found {name.text!r}", name.line)
        if self.peek(1).text == "(":
            self.next()
            self.expect("(")
            params: list[tuple[str, CType]] = []
            if self.peek().text != ")":
                if self.peek().text == "void" and self.peek(1).text == ")":
                    self.next()
                else:
                    while True:
                        ptype = self.parse_type()
                        ptok = self.next()
                        if ptok.kind != "ident":
                            raise _Unsupported(ptok.line, "unnamed parameter")
                        if ptype is None:
                            raise _Unsupported(ptok.line, "void parameter")
                        params.append((ptok.text, ptype))
                        if not self.accept(","):
                            break
            self.expect(")")
            if self.accept(";"):
                self.extern_fns.add(name.text)
                return
            self.expect("{")
            body = self.parse_block_body()
            functions[name.text] = FunctionDef(name.text, ctype, params, body, name.line)
            return
        # global variable declaration(s)
        self.pos = start
        decls = self._parse_decl()
        for d in decls:
            if isinstance(d, Decl):
                globals_.append(d)
            else:
                raise _Unsupported(d.line, "nondet initializer at file scope")


def parse_program(numbered_source: str) -> Program | UnsupportedConstruct:
    """Parse (possibly line-numbered) C source into a :class:`Program`.

    Constructs outside the subset yield :class:`UnsupportedConstruct` — a
    classification, not an error.  Lexical problems raise
    :class:`CParseError`.
    """
    raw = strip_line_prefixes(numbered_source)
    line_count = len(raw.splitlines())
    tokens = tokenize(raw)
    try:
        return _Parser(tokens).parse_program(line_count)
    except _Unsupported as u:
        return UnsupportedConstruct(u.line, u.construct)


def parse_expression(text: str) -> Expr:
    """Parse a standalone C expression (used for witness assumptions)."""
    tokens = tokenize(text)
    parser = _Parser(tokens)
    try:
        expr = parser.parse_expression()
    except _Unsupported as u:
        raise CParseError(f"unsupported in expression: {u.construct}", u.line)
    if parser.peek().kind != "eof":
        raise CParseError(f"trailing input {parser.peek().text!r}",
                          parser.peek().line)
    return expr


# ---------------------------------------------------------------------------
# Evaluation


def eval_expr(expr: Expr, env: dict[str, int],
              types: dict[str, CType]) -> tuple[int, CType]:
    """Evaluate ``expr`` under C semantics; returns (value, type).

    Variables take their declared type; missing declarations default to int.
    Raises :class:`EvalUndefined` on division by zero or invalid shifts and
    ``KeyError`` on unbound variables.
    """
    if isinstance(expr, IntLit):
        return expr.value, expr.ctype
    if isinstance(expr, Var):
        return env[expr.name], types.get(expr.name, INT)
    if isinstance(expr, Unary):
        v, t = eval_expr(expr.operand, env, types)
        t = promote(t)
        v = wrap(v, t)
        if expr.op == "-":
            return wrap(-v, t), t
        if expr.op == "~":
            return wrap(~v, t), t
        if expr.op == "!":
            return (0 if v else 1), INT
        raise ValueError(f"bad unary op {expr.op}")
    if isinstance(expr, Binary):
        op = expr.op
        if op == "&&":
            lv, _ = eval_expr(expr.left, env, types)
            if lv == 0:
                return 0, INT
            rv, _ = eval_expr(expr.right, env, types)
            return (1 if rv else 0), INT
        if op == "||":
            lv, _ = eval_expr(expr.left, env, types)
            if lv != 0:
                return 1, INT
            rv, _ = eval_expr(expr.right, env, types)
            return (1 if rv else 0), INT
        lv, lt = eval_expr(expr.left, env, types)
        rv, rt = eval_expr(expr.right, env, types)
        if op in ("<<", ">>"):
            t = promote(lt)
            a = wrap(lv, t)
            b = wrap(rv, promote(rt))
            if b < 0 or b >= t.width:
                raise EvalUndefined(f"shift by {b} on {t.width}-bit value")
            if op == "<<":
                return wrap(a << b, t), t
            if not t.signed:
                a &= (1 << t.width) - 1
            return wrap(a >> b, t), t
        t = usual_arithmetic_type(lt, rt)
        a, b = wrap(lv, t), wrap(rv, t)
        if not t.signed:
            a &= (1 << t.width) - 1
            b &= (1 << t.width) - 1
        if op in ("<", "<=", ">", ">=", "==", "!="):
            cmp = {"<": a < b, "<=": a <= b, ">": a > b,
                   ">=": a >= b, "==": a == b, "!=": a != b}[op]
            return (1 if cmp else 0), INT
        if op == "+":
            return wrap(a + b, t), t
        if op == "-":
            return wrap(a - b, t), t
        if op == "*":
            return wrap(a * b, t), t
        if op == "/":
            return wrap(c_div(a, b), t), t
        if op == "%":
            return wrap(c_rem(a, b), t), t
        if op == "&":
            return wrap(a & b, t), t
        if op == "|":
            return wrap(a | b, t), t
        if op == "^":
            return wrap(a ^ b, t), t
        raise ValueError(f"bad binary op {op}")
    raise TypeError(f"not an expression: {expr!r}")


def eval_value(expr: Expr, env: dict[str, int],
               types: dict[str, CType] | None = None) -> int:
    return eval_expr(expr, env, types or {})[0]


# ---------------------------------------------------------------------------
# Pretty printer and line resolution


def format_expr(expr: Expr) -> str:
    if isinstance(expr, IntLit):
        return str(expr.value)
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Unary):
        return f"{expr.op}({format_expr(expr.operand)})"
    if isinstance(expr, Binary):
        return f"({format_expr(expr.left)} {expr.op} {format_expr(expr.right)})"
    raise TypeError(f"not an expression: {expr!r}")


def _format_stmt(stmt: Stmt, indent: int, out: list[str]) -> None:
    pad = "    " * indent
    if isinstance(stmt, Decl):
        init = f" = {format_expr(stmt.init)}" if stmt.init is not None else ""
        out.append(f"{pad}{stmt.ctype.name} {stmt.name}{init};")
    elif isinstance(stmt, Assign):
        out.append(f"{pad}{stmt.name} = {format_expr(stmt.expr)};")
    elif isinstance(stmt, NondetAssign):
        fn = next(k for k, v in NONDET_TYPES.items() if v == stmt.ctype)
        out.append(f"{pad}{stmt.name} = {fn}();")
    elif isinstance(stmt, If):
        out.append(f"{pad}if ({format_expr(stmt.cond)}) {{")
        for s in stmt.then_body:
            _format_stmt(s, indent + 1, out)
        if stmt.else_body:
            out.append(f"{pad}}} else {{")
            for s in stmt.else_body:
                _format_stmt(s, indent + 1, out)
        out.append(f"{pad}}}")
    elif isinstance(stmt, While):
        out.append(f"{pad}while ({format_expr(stmt.cond)}) {{")
        for s in stmt.body:
            _format_stmt(s, indent + 1, out)
        out.append(f"{pad}}}")
    elif isinstance(stmt, For):
        parts = ["", "", ""]
        if stmt.init is not None:
            tmp: list[str] = []
            _format_stmt(stmt.init, 0, tmp)
            parts[0] = tmp[0].rstrip(";")
        if stmt.cond is not None:
            parts[1] = format_expr(stmt.cond)
        if stmt.step is not None:
            tmp = []
            _format_stmt(stmt.step, 0, tmp)
            parts[2] = tmp[0].rstrip(";")
        out.append(f"{pad}for ({parts[0]}; {parts[1]}; {parts[2]}) {{")
        for s in stmt.body:
            _format_stmt(s, indent + 1, out)
        out.append(f"{pad}}}")
    elif isinstance(stmt, Return):
        expr = f" {format_expr(stmt.expr)}" if stmt.expr is not None else ""
        out.append(f"{pad}return{expr};")
    elif isinstance(stmt, Block):
        out.append(f"{pad}{{")
        for s in stmt.stmts:
            _format_stmt(s, indent + 1, out)
        out.append(f"{pad}}}")
    else:
        raise TypeError(f"not a statement: {stmt!r}")


def pretty_print(program: Program) -> str:
    """Render a Program back to plain C text (loses original line layout)."""
    out: list[str] = []
    for d in program.globals:
        _format_stmt(d, 0, out)
    for fn in program.functions.values():
        ret = fn.ret_type.name if fn.ret_type else "void"
        params = ", ".join(f"{t.name} {n}" for n, t in fn.params) or "void"
        out.append(f"{ret} {fn.name}({params}) {{")
        for s in fn.body:
            _format_stmt(s, 1, out)
        out.append("}")
    return "\n".join(out) + "\n"


def iter_statements(program: Program):
    """Yield every statement in the program, depth first."""
    def walk(stmts):
        for s in stmts:
            yield s
            if isinstance(s, If):
                yield from walk(s.then_body)
                yield from walk(s.else_body)
            elif isinstance(s, (While, Block)):
                yield from walk(s.body if isinstance(s, While) else s.stmts)
            elif isinstance(s, For):
                if s.init is not None:
                    yield from walk([s.init])
                if s.step is not None:
                    yield from walk([s.step])
                yield from walk(s.body)
    yield from walk(program.globals)
    for fn in program.functions.values():
        yield from walk(fn.body)


def resolve_line(program: Program, line: int) -> list[Stmt]:
    """All statements whose source line equals ``line`` (possibly empty)."""
    return [s for s in iter_statements(program) if s.line == line]


def strip_alpha(program: Program):
    """Structural summary used for round-trip comparison: statement trees
    with line tags dropped (pretty-printing renumbers lines)."""
    def stmt_key(s: Stmt):
        if isinstance(s, Decl):
            init = format_expr(s.init) if s.init is not None else None
            return ("decl", s.name, s.ctype.name, init)
        if isinstance(s, Assign):
            return ("assign", s.name, format_expr(s.expr))
        if isinstance(s, NondetAssign):
            return ("nondet", s.name, s.ctype.name)
        if isinstance(s, If):
            return ("if", format_expr(s.cond),
                    tuple(stmt_key(x) for x in s.then_body),
                    tuple(stmt_key(x) for x in s.else_body))
        if isinstance(s, While):
            return ("while", format_expr(s.cond),
                    tuple(stmt_key(x) for x in s.body))
        if isinstance(s, For):
            return ("for",
                    stmt_key(s.init) if s.init is not None else None,
                    format_expr(s.cond) if s.cond is not None else None,
                    stmt_key(s.step) if s.step is not None else None,
                    tuple(stmt_key(x) for x in s.body))
        if isinstance(s, Return):
            return ("return", format_expr(s.expr) if s.expr is not None else None)
        if isinstance(s, Block):
            return ("block", tuple(stmt_key(x) for x in s.stmts))
        raise TypeError(s)

    return {
        name: tuple(stmt_key(s) for s in fn.body)
        for name, fn in program.functions.items()
    }
