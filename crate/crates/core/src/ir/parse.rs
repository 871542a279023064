//! Line-oriented text parser for the mini-IR.
//!
//! One construct per line; `;` starts a comment. The accepted surface is a
//! superset of what [`super::print_program`] emits: hex and negative
//! immediates, `[byte; count]` repeat initializers, and `fn name()` as sugar
//! for `params=0` all parse, but the printer always emits the canonical form.

use super::{BinOp, Block, CmpOp, Function, Global, Instr, Program, Reg, DEFAULT_ENTRY};

/// Parse failure with 1-based line and column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "parse error at {}:{}: {}", self.line, self.col, self.message)
    }
}

impl std::error::Error for ParseError {}

/// Registers above this do not parse; the validator's definite-assignment
/// analysis uses dense per-register tables.
const MAX_REG: u32 = 65_535;
const MAX_GLOBAL_BYTES: usize = 1 << 24;

struct Cursor<'a> {
    line: &'a str,
    lineno: u32,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(line: &'a str, lineno: u32) -> Self {
        Cursor { line, lineno, pos: 0 }
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.lineno,
            col: self.pos as u32 + 1,
            message: message.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.line[self.pos..]
    }

    fn skip_ws(&mut self) {
        while self.rest().starts_with([' ', '\t']) {
            self.pos += 1;
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.rest().is_empty()
    }

    fn expect_end(&mut self) -> Result<(), ParseError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(self.err(format!("unexpected trailing input `{}`", self.rest())))
        }
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: &str) -> Result<(), ParseError> {
        if self.eat(tok) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{tok}`")))
        }
    }

    fn peek_word(&mut self) -> &'a str {
        self.skip_ws();
        let rest = self.rest();
        let end = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        &rest[..end]
    }

    fn ident(&mut self) -> Result<&'a str, ParseError> {
        self.skip_ws();
        let w = self.peek_word();
        if w.is_empty() || w.as_bytes()[0].is_ascii_digit() {
            return Err(self.err("expected identifier"));
        }
        self.pos += w.len();
        Ok(w)
    }

    fn number(&mut self) -> Result<u64, ParseError> {
        self.skip_ws();
        let rest = self.rest();
        let neg = rest.starts_with('-');
        let digits = &rest[neg as usize..];
        let (radix, digits) = if let Some(hex) = digits.strip_prefix("0x") {
            (16, hex)
        } else {
            (10, digits)
        };
        let end = digits
            .find(|c: char| !c.is_ascii_hexdigit())
            .unwrap_or(digits.len());
        let body = &digits[..end];
        if body.is_empty() {
            return Err(self.err("expected number"));
        }
        let magnitude = u64::from_str_radix(body, radix)
            .map_err(|_| self.err(format!("number `{body}` out of range")))?;
        self.pos += neg as usize + if radix == 16 { 2 } else { 0 } + end;
        Ok(if neg { magnitude.wrapping_neg() } else { magnitude })
    }

    fn reg(&mut self) -> Result<Reg, ParseError> {
        self.skip_ws();
        let w = self.peek_word();
        let idx = w
            .strip_prefix('r')
            .and_then(|n| n.parse::<u32>().ok())
            .ok_or_else(|| self.err(format!("expected register, found `{w}`")))?;
        if idx > MAX_REG {
            return Err(self.err(format!("register index {idx} too large (max {MAX_REG})")));
        }
        self.pos += w.len();
        Ok(Reg(idx))
    }

    /// True when the next word lexes as a register.
    fn peek_reg(&mut self) -> bool {
        let w = self.peek_word();
        w.strip_prefix('r')
            .map(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
            .unwrap_or(false)
    }

    fn width(&mut self) -> Result<u8, ParseError> {
        let n = self.number()?;
        u8::try_from(n).map_err(|_| self.err(format!("width {n} out of range")))
    }
}

fn reg_like(name: &str) -> bool {
    name.strip_prefix('r')
        .map(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
        .unwrap_or(false)
}

struct Parser {
    entry: Option<String>,
    globals: Vec<Global>,
    functions: Vec<Function>,
    cur_fn: Option<Function>,
    cur_block: Option<Block>,
    in_frame: bool,
    seen_block: bool,
}

impl Parser {
    fn new() -> Self {
        Parser {
            entry: None,
            globals: Vec::new(),
            functions: Vec::new(),
            cur_fn: None,
            cur_block: None,
            in_frame: false,
            seen_block: false,
        }
    }

    fn close_block(&mut self) {
        if let Some(b) = self.cur_block.take() {
            self.cur_fn.as_mut().unwrap().blocks.push(b);
        }
    }

    fn line(&mut self, c: &mut Cursor) -> Result<(), ParseError> {
        if self.in_frame {
            return self.frame_line(c);
        }
        if self.cur_fn.is_some() {
            return self.fn_line(c);
        }
        self.top_line(c)
    }

    fn top_line(&mut self, c: &mut Cursor) -> Result<(), ParseError> {
        match c.peek_word() {
            "entry" => {
                c.ident()?;
                if self.entry.is_some() {
                    return Err(c.err("duplicate entry directive"));
                }
                let name = c.ident()?.to_string();
                c.expect_end()?;
                self.entry = Some(name);
            }
            "global" => {
                c.ident()?;
                let name = c.ident()?.to_string();
                if reg_like(&name) {
                    return Err(c.err(format!("`{name}` is reserved for registers")));
                }
                let init = self.global_init(c)?;
                c.expect_end()?;
                self.globals.push(Global { name, init });
            }
            "fn" => {
                c.ident()?;
                let name = c.ident()?.to_string();
                if reg_like(&name) {
                    return Err(c.err(format!("`{name}` is reserved for registers")));
                }
                c.expect("(")?;
                let params = if c.eat(")") {
                    0
                } else {
                    c.expect("params")?;
                    c.expect("=")?;
                    let n = c.number()?;
                    c.expect(")")?;
                    u32::try_from(n).map_err(|_| c.err("too many params"))?
                };
                c.expect("{")?;
                c.expect_end()?;
                self.cur_fn = Some(Function {
                    name,
                    params,
                    frame: Vec::new(),
                    blocks: Vec::new(),
                });
                self.seen_block = false;
            }
            w => return Err(c.err(format!("expected top-level construct, found `{w}`"))),
        }
        Ok(())
    }

    fn global_init(&mut self, c: &mut Cursor) -> Result<Vec<u8>, ParseError> {
        c.expect("[")?;
        let mut init = Vec::new();
        if c.eat("]") {
            return Ok(init);
        }
        let first = c.number()?;
        let byte =
            |c: &Cursor, n: u64| u8::try_from(n).map_err(|_| c.err(format!("byte {n} out of range")));
        if c.eat(";") {
            // Repeat form `[value; count]`.
            let count = c.number()? as usize;
            if count > MAX_GLOBAL_BYTES {
                return Err(c.err("global too large"));
            }
            init = vec![byte(c, first)?; count];
            c.expect("]")?;
            return Ok(init);
        }
        init.push(byte(c, first)?);
        while c.eat(",") {
            let n = c.number()?;
            init.push(byte(c, n)?);
            if init.len() > MAX_GLOBAL_BYTES {
                return Err(c.err("global too large"));
            }
        }
        c.expect("]")?;
        Ok(init)
    }

    fn frame_line(&mut self, c: &mut Cursor) -> Result<(), ParseError> {
        if c.eat("}") {
            c.expect_end()?;
            self.in_frame = false;
            return Ok(());
        }
        let f = self.cur_fn.as_mut().unwrap();
        let name = c.ident()?;
        let expect = format!("slot{}", f.frame.len());
        if name != expect {
            return Err(c.err(format!("expected `{expect}`, found `{name}`")));
        }
        c.expect(":")?;
        let size = c.number()?;
        c.expect_end()?;
        f.frame.push(size);
        Ok(())
    }

    fn fn_line(&mut self, c: &mut Cursor) -> Result<(), ParseError> {
        if c.eat("}") {
            c.expect_end()?;
            self.close_block();
            let f = self.cur_fn.take().unwrap();
            self.functions.push(f);
            return Ok(());
        }
        if c.peek_word() == "frame" {
            c.ident()?;
            if self.seen_block || !self.cur_fn.as_ref().unwrap().frame.is_empty() {
                return Err(c.err("frame block must appear once, before the first block"));
            }
            c.expect("{")?;
            if c.eat("}") {
                c.expect_end()?;
                return Ok(());
            }
            c.expect_end()?;
            self.in_frame = true;
            return Ok(());
        }
        // `label:` introduces a block; anything else is an instruction.
        let save = c.pos;
        if !c.peek_reg() {
            if let Ok(word) = c.ident() {
                if c.eat(":") && c.at_end() {
                    if reg_like(word) {
                        return Err(c.err(format!("`{word}` is reserved for registers")));
                    }
                    self.close_block();
                    self.cur_block = Some(Block {
                        label: word.to_string(),
                        instrs: Vec::new(),
                    });
                    self.seen_block = true;
                    return Ok(());
                }
            }
            c.pos = save;
        }
        let block = self
            .cur_block
            .as_mut()
            .ok_or_else(|| c.err("instruction before first block label"))?;
        block.instrs.push(parse_instr(c)?);
        c.expect_end()?;
        Ok(())
    }
}

fn parse_instr(c: &mut Cursor) -> Result<Instr, ParseError> {
    let op = c.ident()?;
    let bin = |op: BinOp, c: &mut Cursor| -> Result<Instr, ParseError> {
        let dst = c.reg()?;
        c.expect(",")?;
        let a = c.reg()?;
        c.expect(",")?;
        let b = c.reg()?;
        Ok(Instr::Bin { op, dst, a, b })
    };
    match op {
        "const" => {
            let dst = c.reg()?;
            c.expect(",")?;
            let imm = c.number()?;
            Ok(Instr::Const { dst, imm })
        }
        "add" => bin(BinOp::Add, c),
        "sub" => bin(BinOp::Sub, c),
        "mul" => bin(BinOp::Mul, c),
        "and" => bin(BinOp::And, c),
        "or" => bin(BinOp::Or, c),
        "xor" => bin(BinOp::Xor, c),
        "shl" => bin(BinOp::Shl, c),
        "shr" => bin(BinOp::Shr, c),
        "cmp" => {
            let dst = c.reg()?;
            c.expect(",")?;
            let a = c.reg()?;
            c.expect(",")?;
            let b = c.reg()?;
            c.expect(",")?;
            let pred = c.ident()?;
            let op = match pred {
                "eq" => CmpOp::Eq,
                "ne" => CmpOp::Ne,
                "ult" => CmpOp::Ult,
                "ule" => CmpOp::Ule,
                "slt" => CmpOp::Slt,
                "sle" => CmpOp::Sle,
                p => return Err(c.err(format!("unknown predicate `{p}`"))),
            };
            Ok(Instr::Cmp { op, dst, a, b })
        }
        "alloca" => {
            let dst = c.reg()?;
            c.expect(",")?;
            let slot = c.ident()?;
            let idx = slot
                .strip_prefix("slot")
                .and_then(|n| n.parse::<u32>().ok())
                .ok_or_else(|| c.err(format!("expected slot reference, found `{slot}`")))?;
            Ok(Instr::Alloca { dst, slot: idx })
        }
        "global_addr" => {
            let dst = c.reg()?;
            c.expect(",")?;
            let name = c.ident()?.to_string();
            Ok(Instr::GlobalAddr { dst, name })
        }
        "heap_alloc" => {
            let dst = c.reg()?;
            c.expect(",")?;
            let size = c.reg()?;
            Ok(Instr::HeapAlloc { dst, size })
        }
        "cage_alloc" => {
            let dst = c.reg()?;
            c.expect(",")?;
            let size = c.reg()?;
            Ok(Instr::CageAlloc { dst, size })
        }
        "load" => {
            let dst = c.reg()?;
            c.expect(",")?;
            let addr = c.reg()?;
            c.expect(",")?;
            let width = c.width()?;
            Ok(Instr::Load { dst, addr, width })
        }
        "store" => {
            let addr = c.reg()?;
            c.expect(",")?;
            let val = c.reg()?;
            c.expect(",")?;
            let width = c.width()?;
            Ok(Instr::Store { addr, val, width })
        }
        "memcopy" => {
            let dst = c.reg()?;
            c.expect(",")?;
            let src = c.reg()?;
            c.expect(",")?;
            let len = c.reg()?;
            Ok(Instr::MemCopy { dst, src, len })
        }
        "table_put" => {
            let idx = c.reg()?;
            c.expect(",")?;
            let val = c.reg()?;
            Ok(Instr::TablePut { idx, val })
        }
        "table_get" => {
            let dst = c.reg()?;
            c.expect(",")?;
            let idx = c.reg()?;
            Ok(Instr::TableGet { dst, idx })
        }
        "free" => Ok(Instr::Free { addr: c.reg()? }),
        "switch" => {
            let val = c.reg()?;
            c.expect(",")?;
            c.expect("[")?;
            let mut cases = Vec::new();
            if !c.eat("]") {
                loop {
                    let k = c.number()?;
                    c.expect(":")?;
                    let label = c.ident()?.to_string();
                    cases.push((k, label));
                    if c.eat("]") {
                        break;
                    }
                    c.expect(",")?;
                }
            }
            let default = if c.eat(",") {
                c.expect("default")?;
                Some(c.ident()?.to_string())
            } else {
                None
            };
            Ok(Instr::Switch { val, cases, default })
        }
        "br" => Ok(Instr::Br {
            target: c.ident()?.to_string(),
        }),
        "br_if" => {
            let cond = c.reg()?;
            c.expect(",")?;
            let then_to = c.ident()?.to_string();
            c.expect(",")?;
            let else_to = c.ident()?.to_string();
            Ok(Instr::BrIf { cond, then_to, else_to })
        }
        "call" => {
            let dst = if c.peek_reg() {
                let r = c.reg()?;
                c.expect(",")?;
                Some(r)
            } else {
                None
            };
            let callee = c.ident()?.to_string();
            if reg_like(&callee) {
                return Err(c.err(format!("`{callee}` is reserved for registers")));
            }
            c.expect("(")?;
            let mut args = Vec::new();
            if !c.eat(")") {
                loop {
                    args.push(c.reg()?);
                    if c.eat(")") {
                        break;
                    }
                    c.expect(",")?;
                }
            }
            Ok(Instr::Call { dst, callee, args })
        }
        "ret" => {
            let val = if c.at_end() { None } else { Some(c.reg()?) };
            Ok(Instr::Ret { val })
        }
        "fuzz_start" => Ok(Instr::FuzzStart),
        "halt" => Ok(Instr::Halt),
        "hook" => {
            let site = c.number()?;
            let site = u32::try_from(site).map_err(|_| c.err("site id out of range"))?;
            c.expect(",")?;
            let addr = c.reg()?;
            c.expect(",")?;
            let width = c.width()?;
            Ok(Instr::Hook { site, addr, width })
        }
        other => Err(c.err(format!("unknown instruction `{other}`"))),
    }
}

/// Parses program text. Structural rules (resolution, terminators, widths,
/// definite assignment) are the validator's job; this only rejects
/// malformed syntax.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut p = Parser::new();
    for (i, raw) in text.lines().enumerate() {
        // A `;` starts a comment, except inside `[...]` where it is the
        // repeat separator of a global initializer.
        let line = {
            let mut cut = raw.len();
            let mut depth = 0u32;
            for (at, ch) in raw.char_indices() {
                match ch {
                    '[' => depth += 1,
                    ']' => depth = depth.saturating_sub(1),
                    ';' if depth == 0 => {
                        cut = at;
                        break;
                    }
                    _ => {}
                }
            }
            &raw[..cut]
        };
        let mut c = Cursor::new(line, i as u32 + 1);
        if c.at_end() {
            continue;
        }
        p.line(&mut c)?;
    }
    if p.cur_fn.is_some() {
        return Err(ParseError {
            line: text.lines().count() as u32,
            col: 1,
            message: "unterminated function (missing `}`)".into(),
        });
    }
    Ok(Program {
        entry: p.entry.unwrap_or_else(|| DEFAULT_ENTRY.to_string()),
        globals: p.globals,
        functions: p.functions,
    })
}
