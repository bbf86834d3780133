use super::*;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("{line}:{col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("invalid module: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Reg(String),
    Global(String),
    Int(i64),
    Float(f64),
    Punct(&'static str),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Reg(s) => format!("`%{s}`"),
            Tok::Global(s) => format!("`@{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Float(v) => format!("`{v:?}`"),
            Tok::Punct(p) => format!("`{p}`"),
            Tok::Eof => "end of input".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |line, col, message: String| ParseError::Syntax { line, col, message };
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let advance = |n: usize, i: &mut usize, col: &mut usize| {
            *i += n;
            *col += n;
        };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            advance(1, &mut i, &mut col);
            continue;
        }
        if c == ';' {
            while i < chars.len() && chars[i] != '\n' {
                advance(1, &mut i, &mut col);
            }
            continue;
        }
        if c == '%' || c == '@' {
            let start = i + 1;
            let mut j = start;
            while j < chars.len() && is_name_char(chars[j]) {
                j += 1;
            }
            if j == start {
                return Err(err(tl, tc, format!("expected a name after `{c}`")));
            }
            let name: String = chars[start..j].iter().collect();
            advance(j - i, &mut i, &mut col);
            out.push(Token {
                tok: if c == '%' { Tok::Reg(name) } else { Tok::Global(name) },
                line: tl,
                col: tc,
            });
            continue;
        }
        if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let mut j = i + 1;
            let mut is_float = false;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            if j + 1 < chars.len() && chars[j] == '.' && chars[j + 1].is_ascii_digit() {
                is_float = true;
                j += 1;
                while j < chars.len() && chars[j].is_ascii_digit() {
                    j += 1;
                }
            }
            if j < chars.len() && (chars[j] == 'e' || chars[j] == 'E') {
                let mut k = j + 1;
                if k < chars.len() && (chars[k] == '-' || chars[k] == '+') {
                    k += 1;
                }
                if k < chars.len() && chars[k].is_ascii_digit() {
                    is_float = true;
                    j = k;
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                }
            }
            let text: String = chars[i..j].iter().collect();
            let tok = if is_float {
                Tok::Float(text.parse().map_err(|_| err(tl, tc, format!("bad float `{text}`")))?)
            } else {
                Tok::Int(text.parse().map_err(|_| err(tl, tc, format!("integer out of range `{text}`")))?)
            };
            advance(j - i, &mut i, &mut col);
            out.push(Token { tok, line: tl, col: tc });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut j = i;
            while j < chars.len() && is_name_char(chars[j]) {
                j += 1;
            }
            let name: String = chars[i..j].iter().collect();
            advance(j - i, &mut i, &mut col);
            out.push(Token { tok: Tok::Ident(name), line: tl, col: tc });
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
        let punct = ["...", "->", "(", ")", "{", "}", "[", "]", ",", ":", "=", "-"]
            .into_iter()
            .find(|p| rest.starts_with(p));
        match punct {
            Some(p) => {
                advance(p.len(), &mut i, &mut col);
                out.push(Token { tok: Tok::Punct(p), line: tl, col: tc });
            }
            None => return Err(err(tl, tc, format!("unexpected character `{c}`"))),
        }
    }
    out.push(Token { tok: Tok::Eof, line, col });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

type PResult<T> = Result<T, ParseError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.toks[(self.pos + n).min(self.toks.len() - 1)].tok
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> PResult<T> {
        let t = &self.toks[self.pos];
        Err(ParseError::Syntax { line: t.line, col: t.col, message: message.into() })
    }

    fn unexpected<T>(&self, what: &str) -> PResult<T> {
        self.error(format!("expected {what}, found {}", self.peek().describe()))
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_keyword(&self, k: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == k)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.next();
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> PResult<()> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            self.unexpected(&format!("`{p}`"))
        }
    }

    fn expect_keyword(&mut self, k: &str) -> PResult<()> {
        if self.is_keyword(k) {
            self.next();
            Ok(())
        } else {
            self.unexpected(&format!("`{k}`"))
        }
    }

    fn ident(&mut self, what: &str) -> PResult<String> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            _ => self.unexpected(what),
        }
    }

    fn global_name(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Global(s) => {
                self.next();
                Ok(s)
            }
            _ => self.unexpected("`@name`"),
        }
    }

    /// A register reference: `%r` or a bare name.
    fn reg(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Reg(s) | Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            _ => self.unexpected("a register"),
        }
    }

    fn ty(&mut self) -> PResult<Type> {
        match self.peek().clone() {
            Tok::Ident(s) => match Type::from_name(&s) {
                Some(t) => {
                    self.next();
                    Ok(t)
                }
                None => self.error(format!("unknown type `{s}`")),
            },
            _ => self.unexpected("a type"),
        }
    }

    fn constant(&mut self) -> PResult<Const> {
        let neg = self.eat_punct("-");
        let c = match self.next() {
            Tok::Int(v) => Const::Int(v),
            Tok::Float(v) => Const::Float(v),
            Tok::Ident(s) => match s.as_str() {
                "null" => Const::Null,
                "true" => Const::Int(1),
                "false" => Const::Int(0),
                "inf" => Const::Float(f64::INFINITY),
                "NaN" | "nan" => Const::Float(f64::NAN),
                _ => {
                    self.pos -= 1;
                    return self.unexpected("a constant");
                }
            },
            _ => {
                self.pos -= 1;
                return self.unexpected("a constant");
            }
        };
        Ok(match (neg, c) {
            (false, c) => c,
            (true, Const::Int(v)) => Const::Int(v.wrapping_neg()),
            (true, Const::Float(v)) => Const::Float(-v),
            (true, Const::Null) => return self.error("cannot negate null"),
        })
    }

    fn int(&mut self) -> PResult<i64> {
        match self.constant()? {
            Const::Int(v) => Ok(v),
            _ => self.error("expected an integer"),
        }
    }

    fn module(&mut self) -> PResult<Module> {
        self.expect_keyword("module")?;
        let mut m = Module::new(self.ident("a module name")?);
        loop {
            match self.peek().clone() {
                Tok::Eof => break,
                Tok::Ident(k) => match k.as_str() {
                    "global" => {
                        self.next();
                        let name = self.global_name()?;
                        self.expect_punct(":")?;
                        let ty = self.ty()?;
                        self.expect_punct("=")?;
                        let init = self.constant()?;
                        m.globals.push(Global { name, ty, init });
                    }
                    "export" => {
                        self.next();
                        let name = self.global_name()?;
                        m.exported.insert(name);
                    }
                    "visible" => {
                        self.next();
                        let name = self.global_name()?;
                        m.visible.insert(name);
                    }
                    "declare" => {
                        self.next();
                        m.functions.push(self.declaration()?);
                    }
                    "func" => {
                        self.next();
                        m.functions.push(self.function()?);
                    }
                    _ => return self.unexpected("`global`, `export`, `visible`, `declare` or `func`"),
                },
                _ => return self.unexpected("a module item"),
            }
        }
        Ok(m)
    }

    fn declaration(&mut self) -> PResult<Function> {
        let name = self.global_name()?;
        self.expect_punct("(")?;
        let mut params = Vec::new();
        let mut variadic = false;
        if !self.is_punct(")") {
            loop {
                if self.eat_punct("...") {
                    variadic = true;
                    break;
                }
                let ty = self.ty()?;
                params.push(Param::new(format!("a{}", params.len()), ty));
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        self.expect_punct("->")?;
        let ret = self.ty()?;
        let mut f = Function::declaration(name, params, ret);
        f.variadic = variadic;
        Ok(f)
    }

    fn function(&mut self) -> PResult<Function> {
        let name = self.global_name()?;
        self.expect_punct("(")?;
        let mut params = Vec::new();
        let mut variadic = false;
        if !self.is_punct(")") {
            loop {
                if self.eat_punct("...") {
                    variadic = true;
                    break;
                }
                let pname = self.reg()?;
                self.expect_punct(":")?;
                let ty = self.ty()?;
                params.push(Param::new(pname, ty));
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        self.expect_punct("->")?;
        let ret = self.ty()?;
        let mut f = Function::new(name, params, ret);
        f.variadic = variadic;
        if self.is_keyword("exits") {
            self.next();
            let k = self.int()?;
            if !(0..=u32::MAX as i64).contains(&k) {
                return self.error("exit count out of range");
            }
            f.exits = Some(k as u32);
        }
        self.expect_punct("{")?;
        while self.is_keyword("slot") {
            self.next();
            let sname = self.reg()?;
            self.expect_punct(":")?;
            let ty = self.ty()?;
            f.slots.push(Slot::new(sname, ty));
        }
        while !self.is_punct("}") {
            f.blocks.push(self.block()?);
        }
        self.expect_punct("}")?;
        if f.blocks.is_empty() {
            return self.error(format!("function `@{}` has no blocks", f.name));
        }
        Ok(f)
    }

    fn block(&mut self) -> PResult<Block> {
        let label = self.ident("a block label")?;
        self.expect_punct(":")?;
        let mut shared = false;
        if self.eat_punct("[") {
            self.expect_keyword("shared")?;
            self.expect_punct("]")?;
            shared = true;
        }
        let mut instructions = Vec::new();
        loop {
            if let Some(term) = self.terminator()? {
                let mut b = Block::new(label, instructions, term);
                b.shared = shared;
                return Ok(b);
            }
            instructions.push(self.instruction()?);
        }
    }

    fn label(&mut self) -> PResult<String> {
        self.ident("a block label")
    }

    fn terminator(&mut self) -> PResult<Option<Terminator>> {
        let Tok::Ident(k) = self.peek().clone() else {
            return Ok(None);
        };
        // `name = ...` is an instruction even if `name` looks like a keyword.
        if matches!(self.peek_at(1), Tok::Punct("=")) {
            return Ok(None);
        }
        let term = match k.as_str() {
            "br" => {
                self.next();
                Terminator::Br(self.label()?)
            }
            "condbr" => {
                self.next();
                let c = self.reg()?;
                self.expect_punct(",")?;
                let a = self.label()?;
                self.expect_punct(",")?;
                let b = self.label()?;
                Terminator::CondBr(c, a, b)
            }
            "switch" => {
                self.next();
                let value = self.reg()?;
                self.expect_punct(",")?;
                self.expect_punct("[")?;
                let mut cases = Vec::new();
                if !self.is_punct("]") {
                    loop {
                        let k = self.int()?;
                        self.expect_punct("->")?;
                        cases.push((k, self.label()?));
                        if !self.eat_punct(",") {
                            break;
                        }
                    }
                }
                self.expect_punct("]")?;
                self.expect_punct(",")?;
                self.expect_keyword("default")?;
                let default = self.label()?;
                Terminator::Switch { value, cases, default }
            }
            "ret" => {
                self.next();
                let has_operand = match self.peek() {
                    Tok::Reg(_) => true,
                    Tok::Ident(_) => !matches!(self.peek_at(1), Tok::Punct(":")),
                    _ => false,
                };
                Terminator::Ret(if has_operand { Some(self.reg()?) } else { None })
            }
            "unreachable" => {
                self.next();
                Terminator::Unreachable
            }
            _ => return Ok(None),
        };
        Ok(Some(term))
    }

    fn args(&mut self) -> PResult<Vec<String>> {
        self.expect_punct("(")?;
        let mut out = Vec::new();
        if !self.is_punct(")") {
            loop {
                out.push(self.reg()?);
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        Ok(out)
    }

    fn instruction(&mut self) -> PResult<Instruction> {
        let has_result = matches!(self.peek(), Tok::Reg(_) | Tok::Ident(_))
            && matches!(self.peek_at(1), Tok::Punct("="));
        if has_result {
            let r = self.reg()?;
            self.expect_punct("=")?;
            let (ty, op) = self.valued_op()?;
            return Ok(Instruction::with_result(r, ty, op));
        }
        let k = match self.peek().clone() {
            Tok::Ident(k) => k,
            _ => return self.unexpected("an instruction or terminator"),
        };
        let op = match k.as_str() {
            "store" => {
                self.next();
                let v = self.reg()?;
                self.expect_punct(",")?;
                Op::Store(v, self.reg()?)
            }
            "print" => {
                self.next();
                Op::Print(self.reg()?)
            }
            "longjmp" => {
                self.next();
                let b = self.reg()?;
                self.expect_punct(",")?;
                Op::LongJmp(b, self.reg()?)
            }
            "may_throw" => {
                self.next();
                let c = self.reg()?;
                self.expect_punct(",")?;
                Op::MayThrow(c, self.label()?)
            }
            "call" => {
                self.next();
                if matches!(self.peek(), Tok::Ident(_)) {
                    self.ty()?;
                }
                let f = self.global_name()?;
                Op::Call(f, self.args()?)
            }
            "icall" => {
                self.next();
                if matches!(self.peek(), Tok::Ident(_)) && matches!(self.peek_at(1), Tok::Reg(_) | Tok::Ident(_)) {
                    self.ty()?;
                }
                let c = self.reg()?;
                Op::ICall(c, self.args()?)
            }
            _ => return self.unexpected("an instruction or terminator"),
        };
        Ok(Instruction::new(op))
    }

    fn valued_op(&mut self) -> PResult<(Type, Op)> {
        let k = self.ident("an opcode")?;
        if let Some(b) = BinOp::ALL.iter().find(|b| b.name() == k) {
            let ty = self.ty()?;
            let a = self.reg()?;
            self.expect_punct(",")?;
            return Ok((ty, Op::Bin(*b, a, self.reg()?)));
        }
        if let Some(c) = CastOp::ALL.iter().find(|c| c.name() == k) {
            self.ty()?;
            let a = self.reg()?;
            self.expect_keyword("to")?;
            let to = self.ty()?;
            return Ok((to, Op::Cast(*c, a)));
        }
        Ok(match k.as_str() {
            "const" => {
                let ty = self.ty()?;
                (ty, Op::Const(self.constant()?))
            }
            "icmp" => {
                let p = self.ident("a predicate")?;
                let Some(pred) = IntPred::ALL.iter().find(|q| q.name() == p) else {
                    return self.error(format!("unknown icmp predicate `{p}`"));
                };
                self.ty()?;
                let a = self.reg()?;
                self.expect_punct(",")?;
                (Type::I1, Op::Icmp(*pred, a, self.reg()?))
            }
            "fcmp" => {
                let p = self.ident("a predicate")?;
                let Some(pred) = FloatPred::ALL.iter().find(|q| q.name() == p) else {
                    return self.error(format!("unknown fcmp predicate `{p}`"));
                };
                self.ty()?;
                let a = self.reg()?;
                self.expect_punct(",")?;
                (Type::I1, Op::Fcmp(*pred, a, self.reg()?))
            }
            "slot_addr" => (Type::Ptr, Op::SlotAddr(self.reg()?)),
            "global_addr" => (Type::Ptr, Op::GlobalAddr(self.global_name()?)),
            "addr_of_func" => (Type::I64, Op::AddrOfFunc(self.global_name()?)),
            "load" => {
                let ty = self.ty()?;
                (ty, Op::Load(self.reg()?))
            }
            "call" => {
                let ty = self.ty()?;
                let f = self.global_name()?;
                (ty, Op::Call(f, self.args()?))
            }
            "icall" => {
                let ty = self.ty()?;
                let c = self.reg()?;
                (ty, Op::ICall(c, self.args()?))
            }
            "setjmp" => (Type::I32, Op::SetJmp(self.reg()?)),
            _ => {
                self.pos -= 1;
                return self.unexpected("an opcode");
            }
        })
    }
}

/// Parses module text without running the validator.
pub fn parse_module_unchecked(text: &str) -> Result<Module, ParseError> {
    let toks = lex(text)?;
    Parser { toks, pos: 0 }.module()
}

/// Parses and validates a module.
pub fn parse_module(text: &str) -> Result<Module, ParseError> {
    let m = parse_module_unchecked(text)?;
    let violations = validate(&m);
    if violations.is_empty() {
        Ok(m)
    } else {
        Err(ParseError::Invalid(violations))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_function_on_one_line() {
        let m = parse_module("module m func @id(x: i64) -> i64 { entry: ret x }").unwrap();
        assert_eq!(m.functions.len(), 1);
        assert_eq!(m.functions[0].blocks.len(), 1);
        assert_eq!(m.functions[0].blocks[0].terminator, Terminator::Ret(Some("x".into())));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_module("module m\nfunc @f() -> i64 {\n  e: %x = bogus i64\n}").unwrap_err();
        match err {
            ParseError::Syntax { line, col, .. } => assert_eq!((line, col), (3, 11)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_module("module"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_module("module m $"), Err(ParseError::Syntax { .. })));
    }

    #[test]
    fn i64_condition_is_a_validation_error() {
        let err = parse_module(
            "module m func @f(%c: i64) -> void { e: condbr %c, a, b a: ret b: ret }",
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::Invalid(v) if !v.is_empty()));
    }

    #[test]
    fn ret_without_operand_before_label() {
        let m = parse_module("module m func @f() -> void { a: br b b: ret\nc: ret }").unwrap();
        let f = &m.functions[0];
        assert_eq!(f.blocks.len(), 3);
        assert_eq!(f.blocks[1].terminator, Terminator::Ret(None));
    }

    #[test]
    fn negative_and_special_floats() {
        let m = parse_module(
            "module m global @g: f64 = -inf global @h: f64 = -1.5e-3 global @k: i64 = -9223372036854775808",
        )
        .unwrap();
        assert_eq!(m.globals[0].init, Const::Float(f64::NEG_INFINITY));
        assert_eq!(m.globals[1].init, Const::Float(-1.5e-3));
        assert_eq!(m.globals[2].init, Const::Int(i64::MIN));
    }
}
